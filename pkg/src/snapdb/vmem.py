"""User-space emulation of a virtual-memory subsystem.

Models VMAs (reserved virtual areas), a page table (one PTE per accessed
virtual page), a physical page pool with refcounts, main-memory files for
rewirable mappings, and a snapshot call that duplicates a virtual range by
copying its VMAs and PTEs so both ranges share physical pages copy-on-write.

Virtual addresses are abstract 64-bit integers handed out bump/first-fit
style; no real OS memory is mapped. Costs are tracked as operation counters
(snapshot calls, remap calls, VMAs/PTEs copied, pages copied, COW faults)
instead of wall-clock time, which keeps every behavior deterministic and
portable.

Thread-safety: mutating calls on one AddressSpace must be serialized by the
caller. Concurrent reads of already-faulted pages are safe; the first-access
fault path takes a small internal lock so concurrent readers cannot create
duplicate PTEs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

PAGE_SIZE_DEFAULT = 4096

PRIVATE = "private"
SHARED = "shared"
READ_ONLY = "ro"
READ_WRITE = "rw"


class VmemError(Exception):
    """Base class for emulated virtual-memory errors."""


class AlignmentError(VmemError):
    """Address or length not page-aligned (or non-positive)."""


class FaultError(VmemError):
    """Access touched an address not covered by any VMA."""


class ProtectionError(VmemError):
    """Write hit a read-only mapping and no fault hook resolved it."""


class MapFailed(VmemError):
    """Snapshot source/destination range is not (fully) mapped."""


@dataclass
class OpCounters:
    """Monotone operation counts; the substitute for wall-clock cost."""

    snapshot_calls: int = 0
    remap_calls: int = 0
    vmas_copied: int = 0
    ptes_copied: int = 0
    pages_physically_copied: int = 0
    cow_faults: int = 0

    def snapshot(self) -> "OpCounters":
        return OpCounters(
            self.snapshot_calls,
            self.remap_calls,
            self.vmas_copied,
            self.ptes_copied,
            self.pages_physically_copied,
            self.cow_faults,
        )

    def delta(self, since: "OpCounters") -> "OpCounters":
        return OpCounters(
            self.snapshot_calls - since.snapshot_calls,
            self.remap_calls - since.remap_calls,
            self.vmas_copied - since.vmas_copied,
            self.ptes_copied - since.ptes_copied,
            self.pages_physically_copied - since.pages_physically_copied,
            self.cow_faults - since.cow_faults,
        )


class PageStore:
    """Pool of physical pages, allocated in fixed blocks that never move
    (live page views stay valid while the pool grows).

    Each page has a refcount equal to the number of live PTEs mapping it
    plus the number of live file slots backed by it. Pages at refcount 0
    sit in the free list and are zeroed on reuse.
    """

    BLOCK_PAGES = 1024

    def __init__(self, page_size: int = PAGE_SIZE_DEFAULT):
        self.page_size = page_size
        self._blocks: list[np.ndarray] = []
        self._refcount: list[int] = []
        self._free: list[int] = []
        self._lock = threading.Lock()

    def _grow(self) -> None:
        base = len(self._refcount)
        self._blocks.append(np.zeros((self.BLOCK_PAGES, self.page_size), dtype=np.uint8))
        self._refcount.extend([0] * self.BLOCK_PAGES)
        self._free.extend(range(base + self.BLOCK_PAGES - 1, base - 1, -1))

    def alloc_zero(self) -> int:
        with self._lock:
            if not self._free:
                self._grow()
            pid = self._free.pop()
            self.page(pid).fill(0)
            self._refcount[pid] = 1
            return pid

    def alloc_copy(self, src_pid: int) -> int:
        pid = self.alloc_zero()
        self.page(pid)[:] = self.page(src_pid)
        return pid

    def incref(self, pid: int) -> None:
        with self._lock:
            self._refcount[pid] += 1

    def decref(self, pid: int) -> None:
        with self._lock:
            rc = self._refcount[pid] - 1
            assert rc >= 0, "page refcount underflow"
            self._refcount[pid] = rc
            if rc == 0:
                self._free.append(pid)

    def refcount(self, pid: int) -> int:
        return self._refcount[pid]

    def page(self, pid: int) -> np.ndarray:
        """Mutable uint8 view of one physical page."""
        return self._blocks[pid // self.BLOCK_PAGES][pid % self.BLOCK_PAGES]

    def gather(self, pids: list[int]) -> np.ndarray:
        """Contiguous copy of the given pages, in order (C-level gather)."""
        idx = np.asarray(pids, dtype=np.int64)
        out = np.empty((idx.size, self.page_size), dtype=np.uint8)
        bids = idx // self.BLOCK_PAGES
        rows = idx % self.BLOCK_PAGES
        for b in np.unique(bids):
            mask = bids == b
            out[mask] = self._blocks[b][rows[mask]]
        return out.reshape(-1)

    def live_pages(self) -> int:
        return sum(1 for rc in self._refcount if rc > 0)


@dataclass
class Vma:
    """One reserved virtual area: [start, start+length), page-aligned."""

    start: int
    length: int
    visibility: str = PRIVATE
    protection: str = READ_WRITE
    backing: Optional[tuple[int, int]] = None  # (file id, byte offset) or None

    @property
    def end(self) -> int:
        return self.start + self.length

    def copy_rebased(self, new_start: int) -> "Vma":
        return Vma(new_start, self.length, self.visibility, self.protection, self.backing)

    def split_at(self, addr: int) -> tuple["Vma", "Vma"]:
        """Split into [start, addr) and [addr, end), preserving fields."""
        assert self.start < addr < self.end
        low_len = addr - self.start
        high_backing = None
        if self.backing is not None:
            fid, off = self.backing
            high_backing = (fid, off + low_len)
        low = Vma(self.start, low_len, self.visibility, self.protection, self.backing)
        high = Vma(addr, self.length - low_len, self.visibility, self.protection, high_backing)
        return low, high


@dataclass
class Pte:
    """Mapping of a single virtual page to a physical page."""

    vpage: int
    ppage: int
    writable: bool = True
    cow_pending: bool = False


@dataclass
class FileObject:
    """Main-memory file: a sequence of page slots, each backed by a page."""

    fid: int
    slots: list[int] = field(default_factory=list)

    @property
    def nbytes(self) -> int:
        return len(self.slots)


@dataclass
class FaultHook:
    start: int
    length: int
    fn: Callable[["AddressSpace", int], None]

    def covers(self, addr: int) -> bool:
        return self.start <= addr < self.start + self.length


class AddressSpace:
    """An emulated process address space: VMAs, page table, page pool, files."""

    def __init__(self, page_size: int = PAGE_SIZE_DEFAULT):
        self.page_size = page_size
        self.store = PageStore(page_size)
        self.vmas: list[Vma] = []  # kept sorted by start, non-overlapping
        self.ptes: dict[int, Pte] = {}
        self.files: dict[int, FileObject] = {}
        self.counters = OpCounters()
        self.hooks: list[FaultHook] = []
        self._next_fid = 0
        self._fault_lock = threading.Lock()
        # serializes structure mutations (VMA list, files, hooks); the VMA
        # list itself is replaced copy-on-write so readers stay lock-free
        self._mutate_lock = threading.RLock()

    # --- alignment / lookup helpers -------------------------------------

    def _check_aligned(self, *values: int) -> None:
        for v in values:
            if v % self.page_size != 0:
                raise AlignmentError(f"{v:#x} is not a multiple of page size {self.page_size}")

    def _vma_index_at(self, addr: int) -> Optional[int]:
        lo, hi = 0, len(self.vmas)
        while lo < hi:
            mid = (lo + hi) // 2
            v = self.vmas[mid]
            if addr < v.start:
                hi = mid
            elif addr >= v.end:
                lo = mid + 1
            else:
                return mid
        return None

    def vma_at(self, addr: int) -> Optional[Vma]:
        i = self._vma_index_at(addr)
        return None if i is None else self.vmas[i]

    def _covering(self, addr: int, length: int) -> list[int]:
        """Indices of VMAs covering [addr, addr+length) with no gaps, else []."""
        out = []
        pos = addr
        end = addr + length
        while pos < end:
            i = self._vma_index_at(pos)
            if i is None:
                return []
            out.append(i)
            pos = self.vmas[i].end
        return out

    def _insert_vma(self, vma: Vma) -> None:
        new = list(self.vmas)
        lo, hi = 0, len(new)
        while lo < hi:
            mid = (lo + hi) // 2
            if new[mid].start < vma.start:
                lo = mid + 1
            else:
                hi = mid
        new.insert(lo, vma)
        self.vmas = new

    def _find_free(self, length: int) -> int:
        """Lowest free page-aligned address for a fresh area of `length` bytes."""
        candidate = self.page_size  # keep address 0 unmapped
        for v in self.vmas:
            if candidate + length <= v.start:
                return candidate
            candidate = max(candidate, v.end)
        return candidate

    def _split_borders(self, addr: int, length: int) -> None:
        """Split VMAs so that `addr` and `addr+length` fall on VMA borders."""
        for boundary in (addr, addr + length):
            i = self._vma_index_at(boundary)
            if i is not None and self.vmas[i].start < boundary:
                low, high = self.vmas[i].split_at(boundary)
                new = list(self.vmas)
                new[i:i + 1] = [low, high]
                self.vmas = new

    # --- allocation / mapping --------------------------------------------

    def vm_alloc(self, length: int, visibility: str = PRIVATE,
                 backing: Optional[tuple[int, int]] = None) -> int:
        """Reserve a fresh virtual area. Creates one VMA and no PTEs."""
        if length <= 0:
            raise AlignmentError("length must be positive")
        self._check_aligned(length)
        with self._mutate_lock:
            addr = self._find_free(length)
            self._insert_vma(Vma(addr, length, visibility, READ_WRITE, backing))
            return addr

    def vm_unmap(self, addr: int, length: int) -> None:
        """Drop the mapping of [addr, addr+length); PTE page refs released."""
        self._check_aligned(addr, length)
        with self._mutate_lock:
            self._split_borders(addr, length)
            end = addr + length
            self.vmas = [v for v in self.vmas
                         if not (v.start >= addr and v.end <= end)]
            for vpage in range(addr, end, self.page_size):
                pte = self.ptes.pop(vpage, None)
                if pte is not None:
                    self.store.decref(pte.ppage)
            self.hooks = [h for h in self.hooks
                          if not (addr <= h.start and h.start + h.length <= end)]

    def file_create(self, length: int) -> int:
        """Create a main-memory file of `length` bytes (page multiple)."""
        if length <= 0:
            raise AlignmentError("file length must be positive")
        self._check_aligned(length)
        with self._mutate_lock:
            fid = self._next_fid
            self._next_fid += 1
            f = FileObject(fid)
            for _ in range(length // self.page_size):
                f.slots.append(self.store.alloc_zero())
            self.files[fid] = f
            return fid

    def file_extend(self, fid: int, extra_length: int) -> None:
        self._check_aligned(extra_length)
        with self._mutate_lock:
            f = self.files[fid]
            for _ in range(extra_length // self.page_size):
                f.slots.append(self.store.alloc_zero())

    def vm_map_file(self, dst_addr: Optional[int], fid: int, offset: int, length: int,
                    visibility: str = SHARED, protection: str = READ_WRITE) -> int:
        """Map [offset, offset+length) of a file at dst_addr (or a fresh area).

        An existing mapping at dst_addr is replaced; the file-to-virtual wiring
        can be updated at any time. Counts one remap call.
        """
        if length <= 0:
            raise AlignmentError("length must be positive")
        self._check_aligned(offset, length)
        with self._mutate_lock:
            f = self.files[fid]
            if offset + length > f.nbytes * self.page_size:
                raise FaultError("file mapping outside file bounds")
            if dst_addr is None:
                dst_addr = self._find_free(length)
            else:
                self._check_aligned(dst_addr)
                self.vm_unmap(dst_addr, length)
            self._insert_vma(Vma(dst_addr, length, visibility, protection, (fid, offset)))
            self.counters.remap_calls += 1
            return dst_addr

    # --- page access ------------------------------------------------------

    def _ensure_pte(self, vpage: int, vma: Vma) -> Pte:
        pte = self.ptes.get(vpage)
        if pte is not None:
            return pte
        with self._fault_lock:
            pte = self.ptes.get(vpage)
            if pte is not None:
                return pte
            if vma.backing is None:
                ppage = self.store.alloc_zero()
                pte = Pte(vpage, ppage, writable=(vma.protection == READ_WRITE))
            else:
                fid, off = vma.backing
                slot = (off + (vpage - vma.start)) // self.page_size
                ppage = self.files[fid].slots[slot]
                self.store.incref(ppage)
                if vma.visibility == PRIVATE:
                    # private file mapping shares the slot page until written
                    pte = Pte(vpage, ppage, writable=False, cow_pending=True)
                else:
                    pte = Pte(vpage, ppage, writable=(vma.protection == READ_WRITE))
            self.ptes[vpage] = pte
            return pte

    def _page_base(self, addr: int) -> int:
        return addr - (addr % self.page_size)

    def vm_read(self, addr: int, length: int) -> bytes:
        """Read bytes; faults in PTEs for untouched pages (zero-filled anon)."""
        if length == 0:
            return b""
        out = bytearray()
        pos = addr
        end = addr + length
        while pos < end:
            vma = self.vma_at(pos)
            if vma is None:
                raise FaultError(f"read of unmapped address {pos:#x}")
            vbase = self._page_base(pos)
            pte = self._ensure_pte(vbase, vma)
            off = pos - vbase
            take = min(self.page_size - off, end - pos)
            out += self.store.page(pte.ppage)[off:off + take].tobytes()
            pos += take
        return bytes(out)

    def read_array(self, addr: int, length: int) -> np.ndarray:
        """Assembled uint8 copy of [addr, addr+length); fast path for scans."""
        self._check_aligned(addr)
        pids = []
        pos = addr
        end = addr + length
        while pos < end:
            vma = self.vma_at(pos)
            if vma is None:
                raise FaultError(f"read of unmapped address {pos:#x}")
            pids.append(self._ensure_pte(pos, vma).ppage)
            pos += self.page_size
        return self.store.gather(pids)[:length]

    def _cow_separate(self, pte: Pte, vma: Vma) -> None:
        """First write to a shared private page: claim, copy, remap."""
        if self.store.refcount(pte.ppage) == 1:
            # sole owner already; no copy needed
            pte.cow_pending = False
            pte.writable = vma.protection == READ_WRITE
            return
        new = self.store.alloc_copy(pte.ppage)
        self.store.decref(pte.ppage)
        pte.ppage = new
        pte.cow_pending = False
        pte.writable = vma.protection == READ_WRITE
        self.counters.cow_faults += 1
        self.counters.pages_physically_copied += 1

    def vm_write(self, addr: int, data: bytes) -> None:
        """Write bytes; private COW separation on first write to shared pages.

        Writes into a read-only VMA invoke a registered fault hook once and
        retry; a second fault (or no hook) raises ProtectionError. Writes to
        shared file-backed pages go through to the file slot page.
        """
        pos = addr
        end = addr + len(data)
        di = 0
        while pos < end:
            vma = self.vma_at(pos)
            if vma is None:
                raise FaultError(f"write to unmapped address {pos:#x}")
            if vma.protection == READ_ONLY:
                hook = next((h for h in self.hooks if h.covers(pos)), None)
                if hook is None:
                    raise ProtectionError(f"write to read-only page at {pos:#x}")
                hook.fn(self, pos)
                vma = self.vma_at(pos)  # hook may have remapped/split
                if vma is None or vma.protection == READ_ONLY:
                    raise ProtectionError(f"write still faulting at {pos:#x} after hook")
            vbase = self._page_base(pos)
            pte = self._ensure_pte(vbase, vma)
            if pte.cow_pending:
                self._cow_separate(pte, vma)
            off = pos - vbase
            take = min(self.page_size - off, end - pos)
            self.store.page(pte.ppage)[off:off + take] = np.frombuffer(
                data[di:di + take], dtype=np.uint8)
            pos += take
            di += take

    # --- protection / hooks -------------------------------------------------

    def vm_protect(self, addr: int, length: int, protection: str) -> None:
        """Set protection on [addr, addr+length), splitting border VMAs."""
        self._check_aligned(addr, length)
        with self._mutate_lock:
            if not self._covering(addr, length):
                raise FaultError("protect of unmapped range")
            self._split_borders(addr, length)
            end = addr + length
            for v in self.vmas:
                if v.start >= addr and v.end <= end:
                    v.protection = protection
                    self.counters.remap_calls += 1
                    for vpage in range(v.start, v.end, self.page_size):
                        pte = self.ptes.get(vpage)
                        if pte is not None:
                            pte.writable = protection == READ_WRITE and not pte.cow_pending

    def register_fault_hook(self, addr: int, length: int,
                            fn: Callable[["AddressSpace", int], None]) -> None:
        """Run `fn(space, fault_addr)` on write faults inside the range."""
        with self._mutate_lock:
            self.hooks = self.hooks + [FaultHook(addr, length, fn)]

    def unregister_fault_hooks(self, addr: int, length: int) -> None:
        with self._mutate_lock:
            self.hooks = [h for h in self.hooks
                          if not (addr <= h.start and h.start + h.length <= addr + length)]

    # --- the snapshot call ----------------------------------------------------

    def vm_snapshot(self, dst_addr: Optional[int], src_addr: int, length: int) -> int:
        """Duplicate [src_addr, src_addr+length) by copying its VMAs and PTEs.

        Both sides keep mapping the same physical pages; private pages on
        either side are marked copy-on-write and separate on first write.
        With dst_addr None a fresh area is reserved (lowest free address);
        otherwise the destination must already be fully mapped and is
        recycled. Exactly one snapshot call is counted regardless of how
        many VMAs cover the range.
        """
        if length <= 0:
            raise AlignmentError("length must be positive")
        self._check_aligned(src_addr, length)
        if dst_addr is not None:
            self._check_aligned(dst_addr)

        with self._mutate_lock:
            # 1. source must be fully mapped
            if not self._covering(src_addr, length):
                raise MapFailed(
                    f"snapshot source [{src_addr:#x}, +{length:#x}) not fully mapped")

            # 2./3. identify covering VMAs, splitting the borders permanently
            self._split_borders(src_addr, length)
            src_vmas = [self.vmas[i] for i in self._covering(src_addr, length)]

            # 4. reserve or validate the destination
            if dst_addr is None:
                dst_addr = self._find_free(length)
            else:
                if not self._covering(dst_addr, length):
                    raise MapFailed(
                        f"snapshot destination [{dst_addr:#x}, +{length:#x}) not mapped")
                if not (dst_addr + length <= src_addr or src_addr + length <= dst_addr):
                    raise VmemError("snapshot source and destination overlap")
                self.vm_unmap(dst_addr, length)

            # 5.-7. copy VMAs; for private ones also copy the existing PTEs
            # and mark both sides COW
            for v in src_vmas:
                offset = v.start - src_addr
                self._insert_vma(v.copy_rebased(dst_addr + offset))
                self.counters.vmas_copied += 1
                if v.visibility != PRIVATE:
                    continue
                for vpage in range(v.start, v.end, self.page_size):
                    pte = self.ptes.get(vpage)
                    if pte is None:
                        continue
                    dpage = dst_addr + (vpage - src_addr)
                    self.ptes[dpage] = Pte(dpage, pte.ppage, writable=False, cow_pending=True)
                    self.store.incref(pte.ppage)
                    pte.cow_pending = True
                    pte.writable = False
                    self.counters.ptes_copied += 1

            self.counters.snapshot_calls += 1
            return dst_addr

    # --- introspection -----------------------------------------------------

    def debug_dump(self) -> str:
        """Stable textual listing of VMAs with per-VMA PTE counts."""
        lines = []
        for v in self.vmas:
            npte = sum(1 for vpage in range(v.start, v.end, self.page_size)
                       if vpage in self.ptes)
            backing = "anon" if v.backing is None else f"file{v.backing[0]}+{v.backing[1]:#x}"
            lines.append(
                f"vma start={v.start:#x} length={v.length:#x} visibility={v.visibility} "
                f"protection={v.protection} backing={backing} ptes={npte}"
            )
        return "\n".join(lines)

    def check_invariants(self) -> None:
        """Assert VMA ordering, PTE coverage and refcount conservation."""
        for a, b in zip(self.vmas, self.vmas[1:]):
            assert a.end <= b.start, "overlapping VMAs"
        expected: dict[int, int] = {}
        for vpage, pte in self.ptes.items():
            assert pte.vpage == vpage
            assert self.vma_at(vpage) is not None, "PTE outside any VMA"
            assert not (pte.cow_pending and pte.writable), "cow_pending page writable"
            expected[pte.ppage] = expected.get(pte.ppage, 0) + 1
        for f in self.files.values():
            for pid in f.slots:
                expected[pid] = expected.get(pid, 0) + 1
        for pid, rc in enumerate(self.store._refcount):
            assert rc == expected.get(pid, 0), (
                f"page {pid}: refcount {rc} != {expected.get(pid, 0)} references")
