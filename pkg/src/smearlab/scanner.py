"""Ground-truth-free analysis of a dump: kernel pointer candidates and digest checks."""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .memory import PAGE_SIZE, image_reader, walk

Translator = Callable[[int], Optional[int]]


class ScanError(ValueError):
    pass


@dataclass(frozen=True)
class CandidatePointer:
    found_at: int
    value: int
    resolved_pa: Optional[int]

    @property
    def pointed_page(self) -> int:
        return self.resolved_pa // PAGE_SIZE

    @property
    def distance(self) -> int:
        return abs(self.found_at - self.resolved_pa)


def _slots(page_bytes: bytes, unaligned: bool):
    if not unaligned:
        arr = np.frombuffer(page_bytes, dtype="<u8")
        return [(arr, 0, 8)]
    # one strided view per byte phase
    out = []
    for phase in range(8):
        n = (len(page_bytes) - phase) // 8
        out.append((np.frombuffer(page_bytes, dtype="<u8", count=n, offset=phase), phase, 8))
    return out


def scan_page(page_bytes: bytes, canonical_base: int, translate: Translator,
              page_index: int = 0, unaligned: bool = False) -> list:
    """Slots whose little-endian value is >= ``canonical_base`` and translates."""
    if len(page_bytes) != PAGE_SIZE:
        raise ScanError(f"page must be {PAGE_SIZE} bytes, got {len(page_bytes)}")
    base_pa = page_index * PAGE_SIZE
    found = []
    for arr, phase, stride in _slots(bytes(page_bytes), unaligned):
        for i in np.flatnonzero(arr >= np.uint64(canonical_base)):
            value = int(arr[i])
            pa = translate(value)
            if pa is not None:
                found.append(CandidatePointer(base_pa + phase + stride * int(i), value, pa))
    found.sort(key=lambda c: c.found_at)
    return found


def image_translator(image, root_frame: int, page_count: Optional[int] = None) -> Translator:
    """Translate through the page tables as they were captured in ``image``."""
    read = image_reader(image, page_count)

    def translate(va: int) -> Optional[int]:
        t = walk(read, root_frame, va, page_count if page_count is not None else len(image) // PAGE_SIZE)
        return None if t is None else t.pa
    return translate


# --------------------------------------------------------------------------
# digest comparison


@dataclass
class ScanRecord:
    """One candidate seen when its page was dumped, plus the two pointed-page digests."""
    found_at: int
    value: int
    resolved_pa: int
    scan_tick: int
    digest_at_scan: str
    digest_at_dump: Optional[str] = None

    @property
    def pointed_page(self) -> int:
        return self.resolved_pa // PAGE_SIZE

    @property
    def inconsistent(self) -> bool:
        if self.digest_at_dump is None:
            raise ScanError(f"no dump digest for pointer at {self.found_at:#x}")
        return self.digest_at_scan != self.digest_at_dump

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PointerScanStats:
    candidates: int = 0
    inconsistent_count: int = 0
    inconsistent_ratio: float = 0.0
    mean_distance: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.inconsistent_ratio <= 1.0:
            raise ScanError("ratio must lie in [0, 1]")


@dataclass
class ScanResult:
    stats: PointerScanStats
    flagged_pages: list = field(default_factory=list)
    flags: list = field(default_factory=list)


def pointer_inconsistency_scan(timeline, digest_log: list) -> ScanResult:
    """Flag a candidate when its pointed page changed between the two digests.

    Counting is per slot; several slots pointing into the same page each count.
    """
    flags = []
    flagged = set()
    total_distance = 0
    for rec in digest_log:
        if rec.digest_at_dump is None:
            if timeline is None or not 0 <= rec.pointed_page < len(timeline.digests):
                raise ScanError(f"no dump digest for page {rec.pointed_page}")
            rec.digest_at_dump = timeline.digests[rec.pointed_page]
        bad = rec.inconsistent
        flags.append(bad)
        total_distance += abs(rec.found_at - rec.resolved_pa)
        if bad:
            flagged.add(rec.found_at // PAGE_SIZE)
    n = len(flags)
    bad = sum(flags)
    stats = PointerScanStats(n, bad, bad / n if n else 0.0, total_distance / n if n else 0.0)
    return ScanResult(stats, sorted(flagged), flags)


# --------------------------------------------------------------------------
# Hilbert curve


def _rot(n: int, x: int, y: int, rx: int, ry: int) -> tuple:
    if ry == 0:
        if rx == 1:
            x, y = n - 1 - x, n - 1 - y
        x, y = y, x
    return x, y


def hilbert_map(index: int, order: int) -> tuple:
    """Cell (x, y) of ``index`` on the Hilbert curve filling a 2^order square."""
    if order < 0 or not 0 <= index < 4 ** order:
        raise ValueError(f"index {index} out of range for order {order}")
    x = y = 0
    t = index
    s = 1
    n = 1 << order
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        x, y = _rot(s, x, y, rx, ry)
        x += s * rx
        y += s * ry
        t //= 4
        s *= 2
    return x, y


def hilbert_index(x: int, y: int, order: int) -> int:
    n = 1 << order
    if not (0 <= x < n and 0 <= y < n):
        raise ValueError(f"cell ({x}, {y}) outside a {n}x{n} grid")
    d = 0
    s = n // 2
    while s > 0:
        rx = 1 if x & s else 0
        ry = 1 if y & s else 0
        d += s * s * ((3 * rx) ^ ry)
        x, y = _rot(n, x, y, rx, ry)
        s //= 2
    return d


def plot_order(page_count: int) -> int:
    """Smallest order whose grid holds every page: ceil(log4(page_count))."""
    order = 0
    while 4 ** order < page_count:
        order += 1
    return order
