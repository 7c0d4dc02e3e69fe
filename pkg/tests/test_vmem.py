import random

import pytest

from snapdb.vmem import (
    PAGE_SIZE_DEFAULT,
    AddressSpace,
    AlignmentError,
    FaultError,
    MapFailed,
    ProtectionError,
    PRIVATE,
    READ_ONLY,
    READ_WRITE,
    SHARED,
)

from flatmodel import FlatModel

P = PAGE_SIZE_DEFAULT


@pytest.fixture
def space():
    return AddressSpace()


def test_alloc_creates_one_vma_and_no_ptes(space):
    addr = space.vm_alloc(4 * P)
    assert len(space.vmas) == 1
    assert len(space.ptes) == 0
    assert addr % P == 0


def test_first_read_is_zero_and_faults_one_pte(space):
    addr = space.vm_alloc(4 * P)
    assert space.vm_read(addr, 1) == b"\x00"
    assert len(space.ptes) == 1


def test_two_allocs_do_not_overlap(space):
    a = space.vm_alloc(2 * P)
    b = space.vm_alloc(2 * P)
    assert a + 2 * P <= b or b + 2 * P <= a


def test_unaligned_alloc_rejected(space):
    with pytest.raises(AlignmentError):
        space.vm_alloc(P + 1)
    with pytest.raises(AlignmentError):
        space.vm_alloc(0)


def test_write_then_read_roundtrip(space):
    addr = space.vm_alloc(P)
    space.vm_write(addr, b"AB")
    assert space.vm_read(addr, 2) == b"AB"


def test_read_unmapped_faults(space):
    with pytest.raises(FaultError):
        space.vm_read(123 * P, 8)


def test_read_crossing_two_vmas(space):
    # two adjacent areas behave like one flat byte range
    a = space.vm_alloc(P)
    b = space.vm_alloc(P)
    assert b == a + P
    space.vm_write(a + P - 2, b"xy")
    space.vm_write(b, b"YZ")
    got = space.vm_read(a + P - 2, 4)
    assert got == b"xyYZ"


def test_snapshot_shares_pages_then_diverges_on_write(space):
    addr = space.vm_alloc(4 * P)
    space.vm_write(addr + 3 * P, b"hello")
    before = space.counters.pages_physically_copied
    dst = space.vm_snapshot(None, addr, 4 * P)
    assert space.counters.pages_physically_copied == before
    assert space.vm_read(dst + 3 * P, 5) == b"hello"
    # write into source page 3: destination unchanged, one physical copy
    space.vm_write(addr + 3 * P, b"WORLD!!!")
    assert space.vm_read(dst + 3 * P, 5) == b"hello"
    assert space.vm_read(addr + 3 * P, 8) == b"WORLD!!!"
    assert space.counters.pages_physically_copied == before + 1


def test_snapshot_copies_existing_ptes_to_same_physical_pages(space):
    addr = space.vm_alloc(2 * P)
    space.vm_read(addr, 2 * P)  # fault in both pages
    src_pids = [space.ptes[addr].ppage, space.ptes[addr + P].ppage]
    dst = space.vm_snapshot(None, addr, 2 * P)
    assert space.ptes[dst].ppage == src_pids[0]
    assert space.ptes[dst + P].ppage == src_pids[1]
    assert space.counters.ptes_copied == 2


def test_snapshot_of_untouched_area_copies_no_ptes(space):
    addr = space.vm_alloc(2 * P)
    dst = space.vm_snapshot(None, addr, 2 * P)
    assert space.counters.ptes_copied == 0
    assert space.vm_read(dst, 2 * P) == b"\x00" * (2 * P)


def test_snapshot_middle_splits_source_into_three_vmas(space):
    addr = space.vm_alloc(4 * P)
    space.vm_snapshot(None, addr + P, 2 * P)
    src_side = [v for v in space.vmas if v.start < addr + 4 * P]
    dst_side = [v for v in space.vmas if v.start >= addr + 4 * P]
    assert len(src_side) == 3
    assert [v.length for v in src_side] == [P, 2 * P, P]
    assert len(dst_side) == 1
    assert space.counters.vmas_copied == 1


def test_snapshot_unmapped_source_fails(space):
    with pytest.raises(MapFailed):
        space.vm_snapshot(None, 64 * P, P)
    addr = space.vm_alloc(P)
    with pytest.raises(MapFailed):
        space.vm_snapshot(None, addr, 4 * P)  # partially mapped


def test_snapshot_into_existing_area_recycles_it(space):
    src = space.vm_alloc(2 * P)
    dst = space.vm_alloc(2 * P)
    space.vm_write(src, b"abc")
    space.vm_write(dst, b"old")
    got = space.vm_snapshot(dst, src, 2 * P)
    assert got == dst
    assert space.vm_read(dst, 3) == b"abc"
    space.check_invariants()


def test_snapshot_into_unmapped_dst_fails(space):
    src = space.vm_alloc(P)
    with pytest.raises(MapFailed):
        space.vm_snapshot(src + 64 * P, src, P)


def test_snapshot_counts_one_call_regardless_of_vma_count(space):
    base = space.vm_alloc(4 * P)
    # force multiple VMAs by protecting a middle page
    space.vm_protect(base + P, P, READ_ONLY)
    space.vm_protect(base + P, P, READ_WRITE)
    assert len(space.vmas) == 3
    space.vm_snapshot(None, base, 4 * P)
    assert space.counters.snapshot_calls == 1
    assert space.counters.vmas_copied == 3


def test_snapshot_preserves_vma_fields(space):
    fid = space.file_create(2 * P)
    addr = space.vm_map_file(None, fid, 0, 2 * P, visibility=SHARED)
    dst = space.vm_snapshot(None, addr, 2 * P)
    copy = space.vma_at(dst)
    assert copy.visibility == SHARED
    assert copy.protection == READ_WRITE
    assert copy.backing == (fid, 0)


def test_shared_file_mapping_writes_through(space):
    fid = space.file_create(4 * P)
    a = space.vm_map_file(None, fid, 0, 4 * P, visibility=SHARED)
    b = space.vm_map_file(None, fid, 0, 4 * P, visibility=SHARED)
    space.vm_write(a, b"shared")
    assert space.vm_read(b, 6) == b"shared"


def test_remap_single_page_to_other_file_page(space):
    fid = space.file_create(16 * P)
    a = space.vm_map_file(None, fid, 0, 4 * P, visibility=SHARED)
    marker = b"page nine"
    # write through a temporary window into file page 9
    w = space.vm_map_file(None, fid, 9 * P, P, visibility=SHARED)
    space.vm_write(w, marker)
    space.vm_map_file(a + 2 * P, fid, 9 * P, P, visibility=SHARED)
    assert space.vm_read(a + 2 * P, len(marker)) == marker


def test_map_file_zero_length_rejected(space):
    fid = space.file_create(P)
    with pytest.raises(AlignmentError):
        space.vm_map_file(None, fid, 0, 0)


def test_map_file_out_of_range_offset(space):
    fid = space.file_create(P)
    with pytest.raises(FaultError):
        space.vm_map_file(None, fid, P, P)


def test_protect_then_write_raises(space):
    addr = space.vm_alloc(4 * P)
    space.vm_protect(addr, 4 * P, READ_ONLY)
    with pytest.raises(ProtectionError):
        space.vm_write(addr, b"x")


def test_protect_middle_page_splits_into_three(space):
    addr = space.vm_alloc(3 * P)
    space.vm_protect(addr + P, P, READ_ONLY)
    assert len(space.vmas) == 3
    assert space.vma_at(addr + P).protection == READ_ONLY
    assert space.vma_at(addr).protection == READ_WRITE


def test_protect_idempotent(space):
    addr = space.vm_alloc(2 * P)
    space.vm_protect(addr, 2 * P, READ_ONLY)
    n = len(space.vmas)
    space.vm_protect(addr, 2 * P, READ_ONLY)
    assert len(space.vmas) == n
    assert space.vma_at(addr).protection == READ_ONLY


def test_fault_hook_resolves_write(space):
    fid = space.file_create(8 * P)
    addr = space.vm_map_file(None, fid, 0, 4 * P, visibility=SHARED)
    space.vm_protect(addr, 4 * P, READ_ONLY)

    def hook(sp, fault_addr):
        page = fault_addr - fault_addr % P
        off = page - addr
        sp.vm_map_file(page, fid, 4 * P + off, P, visibility=SHARED)

    space.register_fault_hook(addr, 4 * P, hook)
    before = space.counters.remap_calls
    space.vm_write(addr + P, b"ok")
    assert space.vm_read(addr + P, 2) == b"ok"
    assert space.counters.remap_calls > before


def test_no_hook_means_protection_error(space):
    addr = space.vm_alloc(P)
    space.vm_protect(addr, P, READ_ONLY)
    with pytest.raises(ProtectionError):
        space.vm_write(addr, b"x")


def test_hook_on_disjoint_range_not_intercepted(space):
    addr = space.vm_alloc(2 * P)
    space.vm_protect(addr, 2 * P, READ_ONLY)
    space.register_fault_hook(addr + P, P, lambda sp, a: None)
    with pytest.raises(ProtectionError):
        space.vm_write(addr, b"x")


def test_hook_that_does_not_fix_raises_on_retry(space):
    addr = space.vm_alloc(P)
    space.vm_protect(addr, P, READ_ONLY)
    space.register_fault_hook(addr, P, lambda sp, a: None)
    with pytest.raises(ProtectionError):
        space.vm_write(addr, b"x")


def test_private_page_sole_owner_write_is_not_a_cow_fault(space):
    addr = space.vm_alloc(P)
    space.vm_write(addr, b"a")
    dst = space.vm_snapshot(None, addr, P)
    # separate destination, then write source again: refcount is 1, no copy
    space.vm_write(dst, b"b")
    faults = space.counters.cow_faults
    space.vm_write(addr, b"c")
    space.vm_write(addr, b"d")
    assert space.counters.cow_faults == faults


def test_unmap_releases_pages(space):
    addr = space.vm_alloc(4 * P)
    space.vm_write(addr, b"x" * (4 * P))
    live = space.store.live_pages()
    space.vm_unmap(addr, 4 * P)
    assert space.store.live_pages() == live - 4
    space.check_invariants()


def test_debug_dump_golden(space):
    addr = space.vm_alloc(2 * P)
    space.vm_write(addr, b"z")
    fid = space.file_create(P)
    faddr = space.vm_map_file(None, fid, 0, P, visibility=SHARED)
    expected = (
        f"vma start={addr:#x} length={2 * P:#x} visibility=private "
        f"protection=rw backing=anon ptes=1\n"
        f"vma start={faddr:#x} length={P:#x} visibility=shared "
        f"protection=rw backing=file0+0x0 ptes=0"
    )
    assert space.debug_dump() == expected


def test_divergence_locality_per_page(space):
    addr = space.vm_alloc(8 * P)
    payload = bytes(random.Random(0).randrange(256) for _ in range(8 * P))
    space.vm_write(addr, payload)
    dst = space.vm_snapshot(None, addr, 8 * P)
    space.vm_write(addr + 5 * P + 7, b"\xff")
    for page in range(8):
        got = space.vm_read(dst + page * P, P)
        assert got == payload[page * P:(page + 1) * P]


# --- randomized oracle equivalence (small smoke; the full 1000-sequence run
# --- lives in the acceptance suite) -----------------------------------------


def run_random_sequence(seed: int, ops: int = 120, max_pages: int = 48) -> None:
    rng = random.Random(seed)
    space = AddressSpace()
    model = FlatModel(P)
    regions: list[tuple[int, int]] = []   # private anonymous areas (addr, length)
    file_maps: list[tuple[int, int]] = [] # shared file mappings (addr, length)
    pages_used = 0

    def any_region():
        pool = regions + file_maps
        return rng.choice(pool) if pool else None

    for _ in range(ops):
        op = rng.random()
        if (op < 0.18 and pages_used < max_pages) or not regions:
            n = rng.randint(1, 4)
            addr = space.vm_alloc(n * P)
            model.alloc(addr, n * P)
            regions.append((addr, n * P))
            pages_used += n
        elif op < 0.42:
            r = any_region()
            addr, length = r
            off = rng.randrange(length)
            size = rng.randint(1, min(64, length - off))
            data = bytes(rng.randrange(256) for _ in range(size))
            space.vm_write(addr + off, data)
            model.write(addr + off, data)
        elif op < 0.72:
            r = any_region()
            addr, length = r
            off = rng.randrange(length)
            size = rng.randint(1, length - off)
            assert space.vm_read(addr + off, size) == model.read(addr + off, size)
        elif op < 0.86 and pages_used < max_pages:
            addr, length = rng.choice(regions)
            # snapshot a page-aligned subrange of a private anonymous region
            pages = length // P
            first = rng.randrange(pages)
            count = rng.randint(1, pages - first)
            src = addr + first * P
            dst = space.vm_snapshot(None, src, count * P)
            model.alloc(dst, count * P)
            model.snapshot(dst, src, count * P)
            regions.append((dst, count * P))
            pages_used += count
        elif pages_used < max_pages:
            n = rng.randint(1, 3)
            fid = space.file_create(n * P)
            model.create_file(fid, n * P)
            addr = space.vm_map_file(None, fid, 0, n * P, visibility=SHARED)
            model.map_file(addr, fid, 0, n * P)
            file_maps.append((addr, n * P))
            pages_used += n
        space.check_invariants()

    for addr, length in regions + file_maps:
        assert space.vm_read(addr, length) == model.read(addr, length)


@pytest.mark.parametrize("seed", range(25))
def test_random_ops_match_flat_oracle(seed):
    run_random_sequence(seed)
