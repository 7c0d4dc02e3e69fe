"""Uniform interface over the three snapshot strategies.

physical     -- fresh area plus a full byte copy; source and view are fully
                separated at creation time.
rewired      -- fresh area wired onto the same main-memory-file pages, one
                map call per covering VMA, then write-protected on both sides
                with a fault hook doing manual copy-on-write out of a
                free-page pool in the file.
vm_snapshot  -- a single snapshot call duplicating VMAs and PTEs; the
                emulated kernel handles COW.

Creation cost is reported as bytes copied plus modeled call counts, which is
what the strategies actually differ in. Process-fork snapshotting is not
runnable here; it is modeled as a cost formula only (duplicate every VMA and
PTE of the whole space) and reported by the microbenchmark.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import vmem
from .vmem import AddressSpace, READ_ONLY, READ_WRITE, SHARED

PHYSICAL = "physical"
REWIRED = "rewired"
VM_SNAPSHOT = "vm_snapshot"
STRATEGIES = (PHYSICAL, REWIRED, VM_SNAPSHOT)

# free-page pool appended to a rewired file, as a fraction of its data size
POOL_FRACTION = 0.25


class UnsupportedBackingError(Exception):
    """Strategy cannot snapshot this mapping (rewired needs file backing)."""


@dataclass
class SnapshotCost:
    """What one view creation cost: bytes plus modeled call counts."""

    bytes_copied_at_create: int = 0
    invocations_at_create: int = 0
    vmas_touched: int = 0
    ptes_touched: int = 0


class SnapshotBackend:
    """Dispatch for one snapshot strategy over an AddressSpace."""

    def __init__(self, kind: str):
        if kind not in STRATEGIES:
            raise ValueError(f"unknown snapshot strategy {kind!r}")
        self.kind = kind
        # per-file free slot cursor for rewired manual COW
        self._pool_next: dict[int, int] = {}
        self._pool_data_slots: dict[int, int] = {}

    # --- column allocation -------------------------------------------------

    def alloc_area(self, space: AddressSpace, length: int) -> int:
        """Allocate a source area suited to this strategy.

        rewired gets a shared file mapping with a free-page pool appended;
        the other strategies use private anonymous memory.
        """
        if self.kind != REWIRED:
            return space.vm_alloc(length, visibility=vmem.PRIVATE)
        pool = max(space.page_size,
                   int(length * POOL_FRACTION) // space.page_size * space.page_size)
        fid = space.file_create(length + pool)
        addr = space.vm_map_file(None, fid, 0, length, visibility=SHARED)
        self._pool_next[fid] = length // space.page_size
        self._pool_data_slots[fid] = length // space.page_size
        return addr

    def _claim_pool_slot(self, space: AddressSpace, fid: int) -> int:
        nxt = self._pool_next[fid]
        f = space.files[fid]
        if nxt >= f.nbytes:
            space.file_extend(fid, max(space.page_size,
                                       self._pool_data_slots[fid] * space.page_size // 4))
        self._pool_next[fid] = nxt + 1
        return nxt

    # --- view creation -----------------------------------------------------

    def create_view(self, space: AddressSpace, src_addr: int, length: int) -> tuple[int, SnapshotCost]:
        """Create a view of [src_addr, src_addr+length); returns (addr, cost)."""
        before = space.counters.snapshot()
        if self.kind == PHYSICAL:
            view = space.vm_alloc(length, visibility=vmem.PRIVATE)
            data = space.vm_read(src_addr, length)
            space.vm_write(view, data)
            cost = SnapshotCost(bytes_copied_at_create=length, invocations_at_create=1)
        elif self.kind == VM_SNAPSHOT:
            view = space.vm_snapshot(None, src_addr, length)
            d = space.counters.delta(before)
            cost = SnapshotCost(0, 1, d.vmas_copied, d.ptes_copied)
        else:
            view = self._create_rewired(space, src_addr, length, before)
            d = space.counters.delta(before)
            covering = self._covering_vmas(space, view, length)
            cost = SnapshotCost(0, covering, covering, 0)
        return view, cost

    def _covering_vmas(self, space: AddressSpace, addr: int, length: int) -> int:
        return len(space._covering(addr, length))

    def _create_rewired(self, space: AddressSpace, src_addr: int, length: int, before) -> int:
        src_vma = space.vma_at(src_addr)
        if src_vma is None or src_vma.backing is None:
            raise UnsupportedBackingError("rewired snapshot needs a file-backed source")
        view = space.vm_alloc(length, visibility=SHARED)
        space.vm_unmap(view, length)  # reserve the address range, then wire it
        pos = src_addr
        end = src_addr + length
        dst = view
        while pos < end:
            v = space.vma_at(pos)
            if v is None or v.backing is None:
                raise UnsupportedBackingError("rewired snapshot needs a file-backed source")
            fid, off = v.backing
            take = min(v.end, end) - pos
            space.vm_map_file(dst, fid, off + (pos - v.start), take, visibility=SHARED)
            pos += take
            dst += take
        # write protection on both sides: the first write to either must be
        # separated manually out of the free-page pool
        space.vm_protect(view, length, READ_ONLY)
        space.vm_protect(src_addr, length, READ_ONLY)
        space.register_fault_hook(src_addr, length, self._cow_hook)
        space.register_fault_hook(view, length, self._cow_hook)
        return view

    def _cow_hook(self, space: AddressSpace, fault_addr: int) -> None:
        """Manual COW: claim a pool page, copy contents, rewire, unprotect."""
        page = fault_addr - fault_addr % space.page_size
        vma = space.vma_at(page)
        if vma is None or vma.backing is None:
            raise vmem.ProtectionError(f"rewired fault outside file mapping at {fault_addr:#x}")
        fid, off = vma.backing
        slot = self._claim_pool_slot(space, fid)
        old = space.vm_read(page, space.page_size)
        space.vm_map_file(page, fid, slot * space.page_size, space.page_size,
                          visibility=SHARED, protection=READ_WRITE)
        space.vm_write(page, old)

    # --- writes ------------------------------------------------------------

    def write_through(self, space: AddressSpace, addr: int, data: bytes) -> "vmem.OpCounters":
        """Perform a write on either side of a snapshot; returns counter delta."""
        before = space.counters.snapshot()
        space.vm_write(addr, data)
        return space.counters.delta(before)

    # --- destruction ---------------------------------------------------------

    def destroy_view(self, space: AddressSpace, addr: int, length: int) -> None:
        space.unregister_fault_hooks(addr, length)
        space.vm_unmap(addr, length)


def make_backend(kind: str) -> SnapshotBackend:
    return SnapshotBackend(kind)


def modeled_fork_cost(space: AddressSpace) -> tuple[int, int]:
    """Cost formula for process-fork snapshotting: duplicate the whole space."""
    return len(space.vmas), len(space.ptes)
