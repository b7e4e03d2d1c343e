"""Linear acquisition: pages dumped in ascending order while the mutator runs."""
from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

from . import events as ev
from .memory import (KERNEL, PAGE_SIZE, AddressSpace, FrameAllocator, PhysicalMemory,
                     digest_bytes)
from .objects import ObjectGraph, parse_schemas, schemas_to_doc
from .scanner import ScanRecord, scan_page
from .workload import EventStream

SIDECAR_FORMAT = "smearlab-sidecar"
SIDECAR_VERSION = 1


@dataclass(frozen=True)
class NoiseProfile:
    """Self-inflicted writes of the acquisition tool.

    The tool issues ``self_writes_per_page`` writes per dumped page, spread over
    ``self_pages_touched`` scratch frames (and the filler region with
    ``filler_prob``). ``write_amplification`` scales the total number of
    writes observed during the dump relative to a kernel-mode tool, so a
    user-mode profile with 1.82 produces 1.82x the writes of kernel-direct.
    """
    name: str = "none"
    self_writes_per_page: float = 0.0
    self_pages_touched: int = 0
    write_amplification: float = 1.0
    filler_prob: float = 0.0

    def __post_init__(self):
        if self.self_writes_per_page < 0 or self.self_pages_touched < 0:
            raise ValueError("noise counts must be >= 0")
        if self.write_amplification < 1.0:
            raise ValueError("write_amplification must be >= 1")
        if not 0.0 <= self.filler_prob <= 1.0:
            raise ValueError("filler_prob must lie in [0, 1]")
        if self.self_writes_per_page and not self.self_pages_touched:
            raise ValueError("noise writes need at least one scratch page")


NO_NOISE = NoiseProfile()

MODES = {
    "kernel-direct": NoiseProfile("kernel-direct", 4.0, 8, 1.0, 0.0),
    "kernel-buffered": NoiseProfile("kernel-buffered", 4.0, 64, 1.0, 0.5),
    "user": NoiseProfile("user", 4.0, 128, 1.82, 0.5),
}


def noise_profile(mode: str) -> NoiseProfile:
    try:
        return MODES[mode]
    except KeyError:
        raise ValueError(f"unknown acquisition mode {mode!r}; expected one of {sorted(MODES)}") from None


@dataclass
class DumpTimeline:
    page_ticks: list
    digests: list
    mode: str = "none"
    noise: NoiseProfile = NO_NOISE
    start_tick: int = 0
    end_tick: int = 0

    def __len__(self) -> int:
        return len(self.page_ticks)


def dump_tick_of(timeline: DumpTimeline, pa: int) -> int:
    page = pa // PAGE_SIZE
    if pa < 0 or page >= len(timeline.page_ticks):
        raise IndexError(f"address {pa:#x} outside the dump")
    return timeline.page_ticks[page]


@dataclass
class DumpResult:
    image: bytearray
    timeline: DumpTimeline
    log: ev.EventLog
    scan_log: list = field(default_factory=list)
    mutator_writes: int = 0
    noise_writes: int = 0

    @property
    def total_writes(self) -> int:
        return self.mutator_writes + self.noise_writes


class _Rate:
    """Constant or piecewise-constant pages-per-tick schedule."""

    def __init__(self, spec: Union[float, Sequence]):
        if isinstance(spec, (int, float)):
            spec = [(0, float(spec))]
        self.steps = sorted((int(t), float(r)) for t, r in spec)
        if not self.steps or self.steps[0][0] != 0:
            raise ValueError("schedule must start at tick 0")
        if any(r <= 0 for _, r in self.steps):
            raise ValueError("pages_per_tick must be > 0")

    def at(self, tick: int) -> float:
        rate = self.steps[0][1]
        for t, r in self.steps:
            if t > tick:
                break
            rate = r
        return rate


class PageDumper:
    """Captures pages one at a time; the caller decides what happens in between.

    ``order`` is the page sequence (ascending by default). Noise writes go
    to ``scratch`` frames and, with the profile's probability, ``filler``.
    """

    def __init__(self, mem: PhysicalMemory, log: ev.EventLog, graph: Optional[ObjectGraph] = None,
                 aspace: Optional[AddressSpace] = None, *, order: Optional[Sequence] = None,
                 noise: NoiseProfile = NO_NOISE, scratch: Sequence = (), filler: Sequence = (),
                 seed: int = 0, scan: bool = False):
        self.mem = mem
        self.log = log
        self.graph = graph
        self.aspace = aspace
        pc = mem.page_count
        self.order = list(order) if order is not None else list(range(pc))
        if sorted(self.order) != list(range(pc)):
            raise ValueError("dump order must be a permutation of all pages")
        self.noise = noise
        self.scan = scan and aspace is not None
        self.image = bytearray(pc * PAGE_SIZE)
        self.ticks = [0] * pc
        self.digests = [""] * pc
        self.scan_log: list = []
        self.rng = random.Random(f"noise:{seed}")
        self.start = log.now
        self._seen = self.start
        self._pos = 0
        self.mutator = 0
        self.injected = 0
        self.scratch = list(scratch)[:noise.self_pages_touched]
        if noise.self_writes_per_page and not self.scratch:
            raise ValueError("no scratch frames for acquisition noise")
        self.filler = list(filler)

    @property
    def done(self) -> bool:
        return self._pos >= len(self.order)

    @property
    def next_page(self) -> Optional[int]:
        return None if self.done else self.order[self._pos]

    def _count_mutator(self) -> None:
        events = self.log.events
        for e in events[self._seen:]:
            if e.kind in ev.WRITE_KINDS and e.source != ev.NOISE:
                self.mutator += 1
        self._seen = len(events)

    def _inject(self) -> None:
        n = self.noise
        if not n.self_writes_per_page:
            return
        self._count_mutator()
        base = n.self_writes_per_page * (self._pos + 1)
        target = n.write_amplification * (self.mutator + base) - self.mutator
        for _ in range(max(0, int(round(target)) - self.injected)):
            if self.filler and self.rng.random() < n.filler_prob:
                frame = self.rng.choice(self.filler)
            else:
                frame = self.rng.choice(self.scratch)
            pa = frame * PAGE_SIZE + 8 * self.rng.randrange(PAGE_SIZE // 8)
            data = self.rng.getrandbits(64).to_bytes(8, "little")
            self.log.append(ev.Event(ev.WRITE, pa=pa, data=data, old=self.mem.read(pa, 8),
                                     source=ev.NOISE))
            self.mem.write(pa, data)
            self.injected += 1
        self._seen = len(self.log.events)

    def dump_next(self) -> int:
        """Capture the next page and return its dump tick."""
        if self.done:
            raise ValueError("every page has already been dumped")
        k = self.order[self._pos]
        self._inject()
        data = self.mem.page(k)
        self.image[k * PAGE_SIZE:(k + 1) * PAGE_SIZE] = data
        digest = digest_bytes(data)
        e = self.log.append(ev.Event(ev.DUMP, page=k, digest=digest))
        self.ticks[k] = e.tick
        self.digests[k] = digest
        if self.graph is not None:
            self.graph.freeze_page(k, e.tick)
        if self.aspace is not None:
            self.aspace.freeze_page(k, e.tick)
        if self.scan:
            self._scan(k, data, e.tick)
        self._pos += 1
        return e.tick

    def finish(self) -> "DumpResult":
        while not self.done:
            self.dump_next()
        self._count_mutator()
        for rec in self.scan_log:
            rec.digest_at_dump = self.digests[rec.pointed_page]
        timeline = DumpTimeline(self.ticks, self.digests, self.noise.name, self.noise,
                                self.start, self.log.now)
        return DumpResult(self.image, timeline, self.log, self.scan_log, self.mutator,
                          self.injected)

    def _scan(self, k: int, data: bytes, tick: int) -> None:
        aspace = self.aspace
        now = {}
        for c in scan_page(data, aspace.kernel_base, aspace.translate, k):
            page = c.pointed_page
            if page not in now:
                now[page] = digest_bytes(self.mem.page(page))
            self.scan_log.append(ScanRecord(c.found_at, c.value, c.resolved_pa, tick, now[page]))


def run_linear_dump(world, stream: Optional[EventStream], pages_per_tick=1.0,
                    noise: NoiseProfile = NO_NOISE, scan: bool = True) -> DumpResult:
    """Dump every page in ascending order, replaying ``stream`` in between.

    At each stream tick the tick's operations run first, then the dumper
    copies as many pages as the accumulated rate allows. Operations scheduled
    after the last page is captured are not executed.
    """
    rate = _Rate(pages_per_tick)
    d = PageDumper(world.mem, world.log, world.graph, world.aspace, noise=noise,
                   scratch=world.regions.get("scratch", ()), filler=world.regions.get("filler", ()),
                   seed=world.config.seed, scan=scan)
    ops = stream.ops if stream is not None else []
    i = 0
    tick = 0
    acc = 0.0
    while not d.done:
        while i < len(ops) and ops[i][0] <= tick:
            world.apply(ops[i])
            i += 1
        acc += rate.at(tick)
        while acc >= 1.0 - 1e-12 and not d.done:
            d.dump_next()
            acc -= 1.0
        tick += 1
    return d.finish()


def stream_duration(page_count: int, pages_per_tick) -> int:
    """Stream ticks needed to cover a whole dump at the slowest scheduled rate."""
    rate = _Rate(pages_per_tick)
    return int(math.ceil(page_count / min(r for _, r in rate.steps))) + 1


# --------------------------------------------------------------------------
# export and reload


def write_raw(path: Union[str, Path], image: bytes) -> None:
    Path(path).write_bytes(bytes(image))


def sidecar_dict(world, result: DumpResult, config: Optional[dict] = None) -> dict:
    """Everything needed to rebuild ground truth from a ``.raw`` image.

    Keys: format, version, config, page_size, page_count, kernel_base,
    kernel_root_frame, dump{mode, noise, start_tick, end_tick, page_ticks,
    digests, mutator_writes, noise_writes}, schemas, events, scan.
    """
    tl = result.timeline
    return {
        "format": SIDECAR_FORMAT,
        "version": SIDECAR_VERSION,
        "config": config or {},
        "page_size": PAGE_SIZE,
        "page_count": world.mem.page_count,
        "kernel_base": world.aspace.kernel_base,
        "kernel_root_frame": world.aspace.root(KERNEL).frame,
        "dump": {"mode": tl.mode, "noise": asdict(tl.noise), "start_tick": tl.start_tick,
                 "end_tick": tl.end_tick, "page_ticks": tl.page_ticks, "digests": tl.digests,
                 "mutator_writes": result.mutator_writes, "noise_writes": result.noise_writes},
        "schemas": schemas_to_doc(world.schemas),
        "events": result.log.to_list(),
        "scan": [r.to_dict() for r in result.scan_log],
    }


def write_sidecar(path: Union[str, Path], doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


class SidecarError(ValueError):
    pass


def load_sidecar(path: Union[str, Path]) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SidecarError(f"cannot read sidecar {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != SIDECAR_FORMAT:
        raise SidecarError(f"{path} is not a smearlab sidecar")
    if doc.get("version") != SIDECAR_VERSION:
        raise SidecarError(f"unsupported sidecar version {doc.get('version')}")
    for key in ("page_count", "kernel_base", "kernel_root_frame", "dump", "schemas", "events"):
        if key not in doc:
            raise SidecarError(f"sidecar lacks {key!r}")
    return doc


def timeline_from_sidecar(doc: dict) -> DumpTimeline:
    d = doc["dump"]
    return DumpTimeline(list(d["page_ticks"]), list(d["digests"]), d["mode"],
                        NoiseProfile(**d["noise"]), d["start_tick"], d["end_tick"])


def scan_log_from_sidecar(doc: dict) -> list:
    return [ScanRecord(**r) for r in doc.get("scan", [])]


@dataclass
class Replay:
    """Ground truth rebuilt from a saved event log."""
    mem: PhysicalMemory
    aspace: AddressSpace
    graph: ObjectGraph
    log: ev.EventLog
    timeline: DumpTimeline


def replay(doc: dict, on_dump=None) -> Replay:
    """Re-execute a sidecar's event log, re-freezing pages at their dump events.

    ``on_dump(event, mem)`` runs at every dump event, before the freeze.
    """
    pc = doc["page_count"]
    mem = PhysicalMemory(pc * PAGE_SIZE)
    frames = FrameAllocator(pc)
    try:
        log = ev.EventLog.from_list(doc["events"])
    except (TypeError, ValueError) as exc:
        raise SidecarError(f"bad event log: {exc}") from exc
    aspace = AddressSpace(mem, frames, log, doc["kernel_base"])
    graph = ObjectGraph(mem, parse_schemas(doc["schemas"]), frames=frames, log=log,
                        kernel_base=doc["kernel_base"])
    for e in log:
        if e.kind in (ev.PT_ALLOC, ev.PT_FREE, ev.PT_WRITE):
            aspace.apply_logged(e)
        elif e.kind == ev.DUMP:
            if digest_bytes(mem.page(e.page)) != e.digest:
                raise SidecarError(f"page {e.page} does not match its recorded digest")
            if on_dump is not None:
                on_dump(e, mem)
            graph.freeze_page(e.page, e.tick)
            aspace.freeze_page(e.page, e.tick)
        elif not graph.apply_logged(e):
            mem.write(e.pa, e.data)
    root = aspace.table_at.get(doc["kernel_root_frame"])
    if root is None:
        raise SidecarError("kernel root frame holds no page table")
    aspace.roots[KERNEL] = root
    for t in aspace.tables.values():
        if t.level == 0 and t.free_tick is None and t.owner != KERNEL:
            aspace.roots[t.owner] = t.uid
    return Replay(mem, aspace, graph, log, timeline_from_sidecar(doc))
