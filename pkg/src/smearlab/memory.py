"""Physical memory, frame allocation and x86_64-style 4-level page tables.

Page tables live *inside* the simulated physical memory as real 8-byte
entries, so a dump of the memory also captures them and the same walker can
translate against either the live memory or a captured image.
"""
from __future__ import annotations

import bisect
import enum
import hashlib
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import events as ev

PAGE_SIZE = 4096
PAGE_SHIFT = 12
LARGE_PAGE_SIZE = 2 * 1024 * 1024
ENTRIES = 512
LEVELS = 4
DEFAULT_KERNEL_BASE = 0xFFFF800000000000
KERNEL_HALF_INDEX = 256

PTE_PRESENT = 1 << 0
PTE_WRITABLE = 1 << 1
PTE_USER = 1 << 2
PTE_LARGE = 1 << 7
PTE_FRAME_MASK = 0x000FFFFFFFFFF000

_U64 = struct.Struct("<Q")


class AddressSpaceError(ValueError):
    pass


class AllocationError(MemoryError):
    pass


def affected_va_size(level: int) -> int:
    """Virtual span controlled by one entry of a table at ``level`` (0 = root)."""
    if not 0 <= level < LEVELS:
        raise ValueError(f"level must be in 0..3, got {level}")
    return PAGE_SIZE << (9 * (LEVELS - 1 - level))


def table_index(va: int, level: int) -> int:
    return (va >> (PAGE_SHIFT + 9 * (LEVELS - 1 - level))) & (ENTRIES - 1)


def is_canonical(va: int) -> bool:
    if not 0 <= va < 1 << 64:
        return False
    top = va >> 47
    return top == 0 or top == (1 << 17) - 1


def canonicalize(va: int) -> int:
    va &= (1 << 48) - 1
    if va >> 47:
        va |= 0xFFFF << 48
    return va


def make_entry(frame: int, *, writable: bool = True, user: bool = False, large: bool = False) -> int:
    value = PTE_PRESENT | (frame << PAGE_SHIFT)
    if writable:
        value |= PTE_WRITABLE
    if user:
        value |= PTE_USER
    if large:
        value |= PTE_LARGE
    return value


def entry_frame(value: int) -> int:
    return (value & PTE_FRAME_MASK) >> PAGE_SHIFT


# --------------------------------------------------------------------------
# physical memory


@dataclass(frozen=True)
class PageDigest:
    page_index: int
    digest: str
    time: int


def digest_bytes(data: bytes) -> str:
    # 128-bit BLAKE2b
    return hashlib.blake2b(data, digest_size=16).hexdigest()


class PhysicalMemory:
    def __init__(self, size_bytes: int):
        if size_bytes <= 0 or size_bytes % PAGE_SIZE:
            raise ValueError("memory size must be a positive multiple of 4096")
        self.size_bytes = size_bytes
        self.data = bytearray(size_bytes)

    @property
    def page_count(self) -> int:
        return self.size_bytes // PAGE_SIZE

    def _check(self, pa: int, n: int) -> None:
        if pa < 0 or n < 0 or pa + n > self.size_bytes:
            raise IndexError(f"physical access [{pa:#x}, +{n}) out of bounds")

    def read(self, pa: int, n: int) -> bytes:
        self._check(pa, n)
        return bytes(self.data[pa:pa + n])

    def write(self, pa: int, payload: bytes) -> bytes:
        """Write ``payload`` at ``pa`` and return the bytes it replaced."""
        n = len(payload)
        self._check(pa, n)
        old = bytes(self.data[pa:pa + n])
        self.data[pa:pa + n] = payload
        return old

    def read_u64(self, pa: int) -> int:
        self._check(pa, 8)
        return _U64.unpack_from(self.data, pa)[0]

    def page(self, index: int) -> bytes:
        if not 0 <= index < self.page_count:
            raise IndexError(f"page {index} out of range")
        off = index * PAGE_SIZE
        return bytes(self.data[off:off + PAGE_SIZE])

    def snapshot(self) -> bytes:
        return bytes(self.data)


def digest_page(mem: PhysicalMemory, page_index: int, time: int = 0) -> PageDigest:
    return PageDigest(page_index, digest_bytes(mem.page(page_index)), time)


def image_reader(image, page_count: Optional[int] = None) -> Callable[[int], Optional[int]]:
    """u64 reader over a raw byte image that answers None when out of bounds."""
    limit = len(image)

    def read(pa: int) -> Optional[int]:
        if pa < 0 or pa + 8 > limit:
            return None
        return _U64.unpack_from(image, pa)[0]

    return read


# --------------------------------------------------------------------------
# walker


@dataclass(frozen=True)
class Translation:
    pa: int
    writable: bool
    user: bool
    page_size: int


def walk(read_u64: Callable[[int], Optional[int]], root_frame: int, va: int,
         page_count: int) -> Optional[Translation]:
    """Resolve ``va`` through the radix tree rooted at ``root_frame``.

    ``read_u64`` may return None for unreadable addresses. Frames at or past
    ``page_count`` are treated as a broken walk, never dereferenced.
    """
    if not is_canonical(va) or not 0 <= root_frame < page_count:
        return None
    frame = root_frame
    writable = user = True
    for level in range(LEVELS):
        value = read_u64(frame * PAGE_SIZE + 8 * table_index(va, level))
        if value is None or not value & PTE_PRESENT:
            return None
        writable &= bool(value & PTE_WRITABLE)
        user &= bool(value & PTE_USER)
        frame = entry_frame(value)
        if level == 2 and value & PTE_LARGE:
            if frame % ENTRIES or frame + ENTRIES > page_count:
                return None
            offset = va & (LARGE_PAGE_SIZE - 1)
            return Translation(frame * PAGE_SIZE + offset, writable, user, LARGE_PAGE_SIZE)
        if frame >= page_count:
            return None
    return Translation(frame * PAGE_SIZE + (va & (PAGE_SIZE - 1)), writable, user, PAGE_SIZE)


# --------------------------------------------------------------------------
# mapping registry: independent record of what the tree should translate


@dataclass(frozen=True)
class MappingRecord:
    va: int
    pa: int
    length: int
    page_size: int
    writable: bool = True
    user: bool = False

    @property
    def end(self) -> int:
        return self.va + self.length


class MappingRegistry:
    def __init__(self):
        self._starts: list[int] = []
        self._records: list[MappingRecord] = []

    def __iter__(self):
        return iter(list(self._records))

    def __len__(self) -> int:
        return len(self._records)

    def overlaps(self, va: int, length: int) -> bool:
        i = bisect.bisect_right(self._starts, va) - 1
        if i >= 0 and self._records[i].end > va:
            return True
        j = bisect.bisect_left(self._starts, va)
        return j < len(self._starts) and self._starts[j] < va + length

    def add(self, rec: MappingRecord) -> None:
        if self.overlaps(rec.va, rec.length):
            raise AddressSpaceError(f"virtual range {rec.va:#x}+{rec.length:#x} overlaps an existing mapping")
        i = bisect.bisect_left(self._starts, rec.va)
        self._starts.insert(i, rec.va)
        self._records.insert(i, rec)

    def find(self, va: int) -> Optional[MappingRecord]:
        i = bisect.bisect_right(self._starts, va) - 1
        if i >= 0 and va < self._records[i].end:
            return self._records[i]
        return None

    def lookup(self, va: int) -> Optional[Translation]:
        rec = self.find(va)
        if rec is None:
            return None
        return Translation(rec.pa + (va - rec.va), rec.writable, rec.user, rec.page_size)

    def remove(self, va: int, length: int) -> list[MappingRecord]:
        """Remove [va, va+length), which must be fully mapped. Returns removed pieces."""
        pos, end, covered = va, va + length, []
        while pos < end:
            rec = self.find(pos)
            if rec is None:
                raise AddressSpaceError(f"no mapping at {pos:#x}")
            covered.append(rec)
            pos = rec.end
        removed = []
        for rec in covered:
            i = self._records.index(rec)
            del self._records[i]
            del self._starts[i]
            lo, hi = max(rec.va, va), min(rec.end, end)
            if (lo - rec.va) % rec.page_size or (hi - rec.va) % rec.page_size:
                raise AddressSpaceError("unmap must align to the mapping's page size")
            for s, e in ((rec.va, lo), (hi, rec.end)):
                if e > s:
                    self.add(MappingRecord(s, rec.pa + (s - rec.va), e - s, rec.page_size,
                                           rec.writable, rec.user))
            removed.append(MappingRecord(lo, rec.pa + (lo - rec.va), hi - lo, rec.page_size,
                                         rec.writable, rec.user))
        return removed


# --------------------------------------------------------------------------
# frame allocation


class Placement(str, enum.Enum):
    CONTIGUOUS = "contiguous"   # dense next-fit
    CHUNKED = "chunked"         # round-robin over a few compact arenas
    SCATTERED = "scattered"     # uniform random free frame


class FrameAllocator:
    def __init__(self, page_count: int, placement: Placement = Placement.CONTIGUOUS,
                 seed: int = 0, arenas: int = 4, arena_region: float = 0.5):
        self.page_count = page_count
        self.placement = Placement(placement)
        self.rng = random.Random(seed)
        self._free = bytearray(b"\x01") * page_count
        self._cursor = 0
        span = max(1, int(page_count * arena_region))
        self._arena_cursors = [i * span // arenas for i in range(arenas)]
        self._arena_next = 0
        self.allocated = 0

    def is_free(self, frame: int) -> bool:
        return bool(self._free[frame])

    @property
    def free_count(self) -> int:
        return self.page_count - self.allocated

    def reserve(self, frame: int, n: int = 1) -> None:
        if frame < 0 or frame + n > self.page_count:
            raise AllocationError(f"frames {frame}+{n} out of bounds")
        for f in range(frame, frame + n):
            if self._free[f]:
                self._free[f] = 0
                self.allocated += 1

    def free(self, frame: int, n: int = 1) -> None:
        for f in range(frame, frame + n):
            if self._free[f]:
                raise AllocationError(f"double free of frame {f}")
            self._free[f] = 1
            self.allocated -= 1

    def _find_from(self, start: int, n: int) -> int:
        pattern = b"\x01" * n
        i = self._free.find(pattern, start)
        if i < 0:
            i = self._free.find(pattern, 0)
        return i

    def alloc(self, n: int = 1) -> int:
        if self.placement is Placement.CONTIGUOUS:
            frame = self._find_from(self._cursor, n)
            if frame >= 0:
                self._cursor = frame + n
        elif self.placement is Placement.CHUNKED:
            a = self._arena_next
            self._arena_next = (a + 1) % len(self._arena_cursors)
            frame = self._find_from(self._arena_cursors[a], n)
            if frame >= 0:
                self._arena_cursors[a] = frame + n
        else:
            frame = -1
            for _ in range(32):
                cand = self.rng.randrange(0, self.page_count - n + 1)
                if self._free[cand:cand + n] == b"\x01" * n:
                    frame = cand
                    break
            if frame < 0:
                frame = self._find_from(self.rng.randrange(self.page_count), n)
        if frame < 0:
            raise AllocationError(f"no {n} contiguous free frames")
        self.reserve(frame, n)
        return frame


# --------------------------------------------------------------------------
# address space


@dataclass
class PageTable:
    uid: int
    frame: int
    level: int
    owner: int
    alloc_tick: int
    free_tick: Optional[int] = None
    parent: Optional[tuple] = None  # (parent uid, index)
    # index -> [(tick, child uid or None)], non-leaf entries only
    links: dict = field(default_factory=dict)

    def live_at(self, tick: int) -> bool:
        return self.alloc_tick < tick and (self.free_tick is None or tick < self.free_tick)

    def child_at(self, index: int, tick: int) -> tuple:
        """(establishment tick, child uid) of the link at ``index`` as of ``tick``."""
        best = (None, None)
        for t, child in self.links.get(index, ()):
            if t > tick:
                break
            best = (t, child)
        return best


@dataclass(frozen=True)
class FrozenTable:
    uid: int
    frame: int
    level: int
    owner: int
    dump_tick: int
    image: bytes
    # index -> (child uid, child frame bytes at dump_tick)
    targets: dict


KERNEL = 0


class AddressSpace:
    """Physical memory plus every radix tree (kernel root is pid 0)."""

    def __init__(self, mem: PhysicalMemory, frames: Optional[FrameAllocator] = None,
                 log: Optional[ev.EventLog] = None, kernel_base: int = DEFAULT_KERNEL_BASE):
        self.mem = mem
        self.frames = frames or FrameAllocator(mem.page_count)
        self.log = log if log is not None else ev.EventLog()
        self.kernel_base = kernel_base
        self.tables: dict[int, PageTable] = {}
        self.table_at: dict[int, int] = {}
        self.roots: dict[int, int] = {}
        self.registries: dict[int, MappingRegistry] = {}
        self.quicklist: list[int] = []
        self._next_table_uid = 1
        self._next_pid = 1
        self.frozen: dict[int, FrozenTable] = {}

    @property
    def page_count(self) -> int:
        return self.mem.page_count

    # -- low-level table ops ------------------------------------------------

    def alloc_table(self, level: int, owner: int = KERNEL, frame: Optional[int] = None) -> PageTable:
        if frame is None:
            frame = self.quicklist.pop() if self.quicklist else self.frames.alloc()
        elif not 0 <= frame < self.page_count:
            raise AddressSpaceError(f"table frame {frame} out of bounds")
        if frame in self.table_at:
            raise AddressSpaceError(f"frame {frame} already holds a page table")
        e = self.log.append(ev.Event(ev.PT_ALLOC, uid=self._next_table_uid, pa=frame * PAGE_SIZE,
                                     level=level, owner=owner))
        return self._restore_alloc(e)

    def _restore_alloc(self, e: ev.Event) -> PageTable:
        frame = e.pa // PAGE_SIZE
        self.mem.write(e.pa, bytes(PAGE_SIZE))
        t = PageTable(e.uid, frame, e.level, e.owner, e.tick)
        self.tables[t.uid] = t
        self.table_at[frame] = t.uid
        self._next_table_uid = max(self._next_table_uid, t.uid + 1)
        return t

    def free_table(self, uid: int) -> ev.Event:
        t = self.tables.get(uid)
        if t is None or t.free_tick is not None:
            raise AddressSpaceError(f"table {uid} is not live")
        if t.parent is not None:
            raise AddressSpaceError(f"table {uid} is still referenced by table {t.parent[0]}")
        e = self.log.append(ev.Event(ev.PT_FREE, uid=uid, pa=t.frame * PAGE_SIZE))
        self._restore_free(e)
        self.quicklist.append(t.frame)
        return e

    def _restore_free(self, e: ev.Event) -> None:
        t = self.tables[e.uid]
        t.free_tick = e.tick
        del self.table_at[t.frame]

    def set_entry(self, table: PageTable, index: int, value: int,
                  child: Optional[PageTable] = None) -> ev.Event:
        pa = table.frame * PAGE_SIZE + 8 * index
        old = self.mem.read(pa, 8)
        links = table.links.get(index)
        if links and links[-1][1] is not None:
            prev = self.tables[links[-1][1]]
            if prev.parent == (table.uid, index):
                prev.parent = None
        e = self.log.append(ev.Event(ev.PT_WRITE, pa=pa, data=_U64.pack(value), old=old,
                                     uid=table.uid, index=index, level=table.level,
                                     dst=child.uid if child else None, source=ev.MUTATOR))
        self._restore_write(e)
        if child is not None:
            child.parent = (table.uid, index)
        return e

    def _restore_write(self, e: ev.Event) -> None:
        self.mem.write(e.pa, e.data)
        table = self.tables[e.uid]
        value = _U64.unpack(e.data)[0]
        if table.level < LEVELS - 1 and not (table.level == 2 and value & PTE_LARGE):
            if e.dst is not None or e.index in table.links:
                table.links.setdefault(e.index, []).append((e.tick, e.dst))

    def read_entry(self, table: PageTable, index: int) -> int:
        return self.mem.read_u64(table.frame * PAGE_SIZE + 8 * index)

    # -- trees -------------------------------------------------------------

    def root(self, pid: int) -> PageTable:
        return self.tables[self.roots[pid]]

    def create_kernel_root(self) -> PageTable:
        if KERNEL in self.roots:
            raise AddressSpaceError("kernel root already exists")
        t = self.alloc_table(0, KERNEL)
        self.roots[KERNEL] = t.uid
        self.registries[KERNEL] = MappingRegistry()
        return t

    def create_process(self) -> int:
        pid = self._next_pid
        self._next_pid += 1
        root = self.alloc_table(0, pid)
        self.roots[pid] = root.uid
        self.registries[pid] = MappingRegistry()
        kroot = self.root(KERNEL)
        for i in range(KERNEL_HALF_INDEX, ENTRIES):
            value = self.read_entry(kroot, i)
            if value & PTE_PRESENT:
                child_uid = self.table_at.get(entry_frame(value))
                self._share_entry(root, i, value, child_uid)
        return pid

    def _share_entry(self, table: PageTable, index: int, value: int, child_uid) -> None:
        # kernel-half links are shared: they never claim the child's parent slot
        pa = table.frame * PAGE_SIZE + 8 * index
        old = self.mem.read(pa, 8)
        e = self.log.append(ev.Event(ev.PT_WRITE, pa=pa, data=_U64.pack(value), old=old,
                                     uid=table.uid, index=index, level=table.level,
                                     dst=child_uid, source=ev.MUTATOR))
        self._restore_write(e)

    def destroy_process(self, pid: int) -> None:
        if pid == KERNEL or pid not in self.roots:
            raise AddressSpaceError(f"no process {pid}")
        root = self.root(pid)
        for rec in list(self.registries[pid]):
            self.unmap(pid, rec.va, rec.length)
        self._free_subtrees(root, KERNEL_HALF_INDEX)
        for i in range(KERNEL_HALF_INDEX, ENTRIES):
            if self.read_entry(root, i) & PTE_PRESENT:
                self.set_entry(root, i, 0)
        self.free_table(root.uid)
        del self.roots[pid]
        del self.registries[pid]

    def _free_subtrees(self, table: PageTable, limit: int = ENTRIES) -> None:
        for i in range(limit):
            value = self.read_entry(table, i)
            if not value & PTE_PRESENT:
                continue
            child_uid = self.table_at.get(entry_frame(value))
            is_link = table.level < 2 or (table.level == 2 and not value & PTE_LARGE)
            self.set_entry(table, i, 0)
            if is_link and child_uid is not None:
                child = self.tables[child_uid]
                self._free_subtrees(child)
                self.free_table(child_uid)

    def _walk_tables(self, pid: int, va: int, create: bool, user: bool,
                     leaf_level: int = LEVELS - 1) -> list:
        """Tables on the path to ``va`` down to ``leaf_level``; allocates missing ones if ``create``."""
        path = [self.root(pid)]
        for level in range(leaf_level):
            table = path[-1]
            idx = table_index(va, level)
            value = self.read_entry(table, idx)
            if value & PTE_PRESENT:
                if level == 2 and value & PTE_LARGE:
                    raise AddressSpaceError(f"{va:#x} is covered by a large page")
                child_uid = self.table_at.get(entry_frame(value))
                if child_uid is None:
                    raise AddressSpaceError(f"entry at level {level} points to a non-table frame")
                path.append(self.tables[child_uid])
                continue
            if not create:
                return path
            kernel_half = level == 0 and idx >= KERNEL_HALF_INDEX
            owner = KERNEL if kernel_half else table.owner
            child = self.alloc_table(level + 1, owner)
            entry = make_entry(child.frame, writable=True, user=user or not kernel_half)
            if kernel_half and pid == KERNEL:
                self.set_entry(table, idx, entry, child)
                for other, root_uid in self.roots.items():
                    if other != KERNEL:
                        self._share_entry(self.tables[root_uid], idx, entry, child.uid)
            else:
                self.set_entry(table, idx, entry, child)
            path.append(child)
        return path

    def _registry_for(self, pid: int, va: int) -> MappingRegistry:
        if pid != KERNEL and table_index(va, 0) >= KERNEL_HALF_INDEX:
            return self.registries[KERNEL]
        return self.registries[pid]

    # -- mapping ops ---------------------------------------------------------

    def map(self, pid: int, va: int, pa: int, length: int, page_size: int = PAGE_SIZE,
            writable: bool = True, user: bool = False) -> list:
        if page_size not in (PAGE_SIZE, LARGE_PAGE_SIZE):
            raise AddressSpaceError("page size must be 4KiB or 2MiB")
        if va % page_size or pa % page_size or length <= 0 or length % page_size:
            raise AddressSpaceError("mapping must be aligned to its page size")
        if pa + length > self.mem.size_bytes:
            raise AddressSpaceError(f"frames {pa // PAGE_SIZE}+ out of bounds")
        if not (is_canonical(va) and is_canonical(va + length - 1)) or \
                (va >> 47) != ((va + length - 1) >> 47):
            raise AddressSpaceError(f"{va:#x} is not a canonical range")
        if pid != KERNEL and table_index(va, 0) >= KERNEL_HALF_INDEX:
            raise AddressSpaceError("kernel-half mappings belong to the kernel root")
        registry = self._registry_for(pid, va)
        if registry.overlaps(va, length):
            raise AddressSpaceError(f"virtual range {va:#x}+{length:#x} overlaps an existing mapping")
        start = self.log.now
        large = page_size == LARGE_PAGE_SIZE
        for off in range(0, length, page_size):
            leaf_level = 2 if large else 3
            path = self._walk_tables(pid, va + off, create=True, user=user, leaf_level=leaf_level)
            table = path[leaf_level]
            idx = table_index(va + off, leaf_level)
            if self.read_entry(table, idx) & PTE_PRESENT:
                raise AddressSpaceError(f"{va + off:#x} already mapped in the tree")
            self.set_entry(table, idx, make_entry((pa + off) >> PAGE_SHIFT, writable=writable,
                                                  user=user, large=large))
        registry.add(MappingRecord(va, pa, length, page_size, writable, user))
        return self.log.events[start:]

    def _prune_empty(self, path: list, va: int) -> None:
        for level in range(len(path) - 1, 0, -1):
            table = path[level]
            if table.owner == KERNEL and level == 1:
                return
            if any(self.read_entry(table, i) & PTE_PRESENT for i in range(ENTRIES)):
                return
            parent = path[level - 1]
            self.set_entry(parent, table_index(va, level - 1), 0)
            self.free_table(table.uid)

    def unmap(self, pid: int, va: int, length: int) -> list:
        registry = self._registry_for(pid, va)
        start = self.log.now
        removed = registry.remove(va, length)  # validates before touching the tree
        for rec in removed:
            self._unmap_leaves_known(pid, rec)
        return self.log.events[start:]

    def _unmap_leaves_known(self, pid: int, rec: MappingRecord) -> None:
        leaf_level = 2 if rec.page_size == LARGE_PAGE_SIZE else 3
        for off in range(0, rec.length, rec.page_size):
            path = self._walk_tables(pid, rec.va + off, create=False, user=False,
                                     leaf_level=leaf_level)
            self.set_entry(path[leaf_level], table_index(rec.va + off, leaf_level), 0)
            self._prune_empty(path[:leaf_level + 1], rec.va + off)

    def remap(self, pid: int, va: int, new_pa: int) -> list:
        registry = self._registry_for(pid, va)
        rec = registry.find(va)
        if rec is None:
            raise AddressSpaceError(f"no mapping at {va:#x}")
        size = rec.page_size
        page_va = va - (va - rec.va) % size
        if new_pa % size or new_pa + size > self.mem.size_bytes:
            raise AddressSpaceError("remap target misaligned or out of bounds")
        start = self.log.now
        registry.remove(page_va, size)
        registry.add(MappingRecord(page_va, new_pa, size, size, rec.writable, rec.user))
        leaf_level = 2 if size == LARGE_PAGE_SIZE else 3
        path = self._walk_tables(pid, page_va, create=False, user=False, leaf_level=leaf_level)
        self.set_entry(path[leaf_level], table_index(page_va, leaf_level),
                       make_entry(new_pa >> PAGE_SHIFT, writable=rec.writable, user=rec.user,
                                  large=size == LARGE_PAGE_SIZE))
        return self.log.events[start:]

    # -- queries -------------------------------------------------------------

    def translate(self, va: int, pid: int = KERNEL) -> Optional[int]:
        t = walk(self.mem.read_u64, self.root(pid).frame, va, self.page_count)
        return None if t is None else t.pa

    def registry_translate(self, va: int, pid: int = KERNEL) -> Optional[int]:
        if not is_canonical(va):
            return None
        t = self._registry_for(pid, va).lookup(va)
        return None if t is None else t.pa

    def freeze_page(self, page: int, tick: int) -> Optional[FrozenTable]:
        uid = self.table_at.get(page)
        if uid is None:
            return None
        t = self.tables[uid]
        image = self.mem.page(page)
        targets = {}
        for index in t.links:
            _, child_uid = t.child_at(index, tick)
            if child_uid is None:
                continue
            child = self.tables[child_uid]
            targets[index] = (child_uid, self.mem.page(child.frame))
        ft = FrozenTable(uid, page, t.level, t.owner, tick, image, targets)
        self.frozen[page] = ft
        return ft

    def apply_logged(self, e: ev.Event) -> None:
        """Re-apply a page-table record from a saved log."""
        if e.kind == ev.PT_ALLOC:
            self._restore_alloc(e)
            self.frames.reserve(e.pa // PAGE_SIZE)
        elif e.kind == ev.PT_FREE:
            self._restore_free(e)
        elif e.kind == ev.PT_WRITE:
            self._restore_write(e)


# --------------------------------------------------------------------------
# construction from a mapping plan


@dataclass
class PlanMapping:
    va: int
    frame: int
    pages: int
    page_size: int = PAGE_SIZE
    writable: bool = True
    user: bool = False


@dataclass
class MappingPlan:
    """What ``build_address_space`` installs into the kernel root.

    JSON schema (all integers may also be hex strings)::

        {"kernel_base": "0xffff800000000000",
         "direct_map": true,
         "direct_map_page_size": 2097152,
         "mappings": [{"va": ..., "frame": ..., "pages": ...,
                       "page_size": 4096, "writable": true, "user": false}]}
    """
    kernel_base: int = DEFAULT_KERNEL_BASE
    direct_map: bool = True
    direct_map_page_size: int = LARGE_PAGE_SIZE
    mappings: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "MappingPlan":
        def num(x):
            return int(x, 0) if isinstance(x, str) else int(x)
        maps = [PlanMapping(num(m["va"]), num(m["frame"]), num(m["pages"]),
                            num(m.get("page_size", PAGE_SIZE)), bool(m.get("writable", True)),
                            bool(m.get("user", False))) for m in d.get("mappings", [])]
        return cls(num(d.get("kernel_base", DEFAULT_KERNEL_BASE)), bool(d.get("direct_map", True)),
                   num(d.get("direct_map_page_size", LARGE_PAGE_SIZE)), maps)


def build_address_space(mem_size: int, plan: Optional[MappingPlan] = None, *,
                        log: Optional[ev.EventLog] = None,
                        frames: Optional[FrameAllocator] = None) -> AddressSpace:
    plan = plan or MappingPlan()
    if mem_size < LARGE_PAGE_SIZE:
        raise AddressSpaceError("memory must be at least 2MiB")
    mem = PhysicalMemory(mem_size)
    for m in plan.mappings:
        if m.frame < 0 or m.pages <= 0 or \
                m.frame * PAGE_SIZE + m.pages * m.page_size > mem_size:
            raise AddressSpaceError(f"mapping at {m.va:#x} references out-of-bounds frames")
    aspace = AddressSpace(mem, frames or FrameAllocator(mem.page_count), log, plan.kernel_base)
    aspace.create_kernel_root()
    if plan.direct_map:
        size = plan.direct_map_page_size
        large_len = mem_size - mem_size % size
        if large_len:
            aspace.map(KERNEL, plan.kernel_base, 0, large_len, size)
        if mem_size > large_len:
            aspace.map(KERNEL, plan.kernel_base + large_len, large_len, mem_size - large_len)
    for m in plan.mappings:
        aspace.map(KERNEL, m.va, m.frame * PAGE_SIZE, m.pages * m.page_size, m.page_size,
                   m.writable, m.user)
    return aspace


def iter_mapped_pages(registry: MappingRegistry) -> Iterable[tuple]:
    """(va, pa) for every 4KiB page of every record."""
    for rec in registry:
        for off in range(0, rec.length, PAGE_SIZE):
            yield rec.va + off, rec.pa + off
