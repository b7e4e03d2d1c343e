"""The simulated machine: memory, page tables, tracked objects and filler regions.

``World`` boots a deterministic kernel-like state and then executes the
symbolic operations produced by :mod:`smearlab.workload`.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, asdict
from typing import Optional

from . import events as ev
from .memory import (DEFAULT_KERNEL_BASE, KERNEL, PAGE_SHIFT, PAGE_SIZE, AddressSpace,
                     FrameAllocator, MappingPlan, Placement, build_address_space)
from .objects import ObjectGraph, load_schemas
from .workload import USER_WINDOWS, Shadow

MiB = 1 << 20
# offsets from the kernel base of the vmalloc-like fill area and the churn window
VMALLOC_OFFSET = 0x490000000000
KWINDOW_OFFSET = 0x4A0000000000


@dataclass
class WorldConfig:
    mem_size: int = 64 * MiB
    placement: Placement = Placement.CHUNKED
    seed: int = 0
    kernel_base: int = DEFAULT_KERNEL_BASE
    population: Optional[int] = None     # tracked structs at boot; default page_count // 5
    processes: int = 4
    pages_per_process: int = 16
    vmalloc_pages: Optional[int] = None  # default page_count // 64
    global_pages: int = 4
    filler_pages: Optional[int] = None   # page-cache-like region; default page_count // 64
    scratch_pages: int = 512             # reserved for acquisition self-noise
    kernel_window_pages: int = 512
    kernel_window_boot: int = 16
    straddle_prob: float = 0.001

    def __post_init__(self):
        self.placement = Placement(self.placement)
        if self.mem_size % PAGE_SIZE or self.mem_size < 2 * MiB:
            raise ValueError("mem_size must be a multiple of 4096 and at least 2MiB")
        if not 0 <= self.straddle_prob <= 1:
            raise ValueError("straddle_prob must lie in [0, 1]")
        if self.kernel_base + KWINDOW_OFFSET + self.kernel_window_pages * PAGE_SIZE >= 1 << 64:
            raise ValueError("kernel base leaves no room for the vmalloc windows")

    @property
    def page_count(self) -> int:
        return self.mem_size // PAGE_SIZE

    def resolved(self) -> "WorldConfig":
        n = self.page_count
        return WorldConfig(**{**asdict(self),
                              "population": self.population if self.population is not None else n // 5,
                              "vmalloc_pages": self.vmalloc_pages if self.vmalloc_pages is not None else max(1, n // 64),
                              "filler_pages": self.filler_pages if self.filler_pages is not None else max(1, n // 64),
                              "scratch_pages": min(self.scratch_pages, max(1, n // 16))})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = self.placement.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


class World:
    def __init__(self, config: WorldConfig, schemas: Optional[dict] = None):
        self.config = config.resolved()
        cfg = self.config
        self.rng = random.Random(cfg.seed)
        self.log = ev.EventLog()
        self.frames = FrameAllocator(cfg.page_count, cfg.placement, cfg.seed)
        self.aspace: AddressSpace = build_address_space(
            cfg.mem_size, MappingPlan(kernel_base=cfg.kernel_base), log=self.log, frames=self.frames)
        self.mem = self.aspace.mem
        self.schemas = schemas if schemas is not None else load_schemas()
        self.graph = ObjectGraph(self.mem, self.schemas, frames=self.frames, log=self.log,
                                 kernel_base=cfg.kernel_base, straddle_prob=cfg.straddle_prob,
                                 seed=cfg.seed)
        self.regions: dict[str, list] = {}
        self.data_frames: dict[tuple, int] = {}
        self._boot()

    # -- boot ----------------------------------------------------------------

    def _boot(self) -> None:
        cfg = self.config
        base = self.frames.alloc(cfg.global_pages)
        self.regions["global"] = list(range(base, base + cfg.global_pages))
        vm = []
        va = cfg.kernel_base + VMALLOC_OFFSET
        for i in range(cfg.vmalloc_pages):
            f = self.frames.alloc()
            self.aspace.map(KERNEL, va + i * PAGE_SIZE, f * PAGE_SIZE, PAGE_SIZE)
            vm.append(f)
        self.regions["vmalloc"] = vm
        self.regions["filler"] = [self.frames.alloc() for _ in range(cfg.filler_pages)]
        self.regions["scratch"] = [self.frames.alloc() for _ in range(cfg.scratch_pages)]
        kfirst = (cfg.kernel_base + KWINDOW_OFFSET) >> PAGE_SHIFT
        for vpn in self.rng.sample(range(kfirst, kfirst + cfg.kernel_window_pages),
                                   min(cfg.kernel_window_boot, cfg.kernel_window_pages)):
            self.map_page(KERNEL, vpn)
        for _ in range(cfg.processes):
            pid = self.aspace.create_process()
            for _ in range(cfg.pages_per_process):
                first, count = self.rng.choice(USER_WINDOWS)
                vpn = first + self.rng.randrange(count)
                if (pid, vpn) not in self.data_frames:
                    self.map_page(pid, vpn)
        self._boot_population(cfg.population)

    def _boot_population(self, total: int) -> None:
        schemas = list(self.schemas.values())
        weight = sum(s.instances for s in schemas) or 1
        names = []
        for s in schemas:
            names += [s.name] * max(2, round(total * s.instances / weight))
        self.rng.shuffle(names)
        for name in names:
            self.graph.alloc_struct(name)
        by_schema: dict[str, list] = {}
        for uid in sorted(self.graph.live):
            by_schema.setdefault(self.graph.structs[uid].schema.name, []).append(uid)
        for uid in sorted(self.graph.live):
            for f in self.graph.structs[uid].schema.pointer_fields:
                pool = by_schema.get(f.target, ())
                if pool:
                    dst = self.rng.choice(pool)
                    if dst != uid:
                        self.graph.set_pointer(uid, f.name, dst)

    # -- primitive mutations ---------------------------------------------------

    def region_pa(self, region: str, offset: int) -> int:
        return self.regions[region][offset // PAGE_SIZE] * PAGE_SIZE + offset % PAGE_SIZE

    def raw_write(self, pa: int, data: bytes, source: str = ev.MUTATOR) -> ev.Event:
        """Untracked write (filler, globals, acquisition scratch)."""
        e = ev.Event(ev.WRITE, pa=pa, data=bytes(data), old=self.mem.read(pa, len(data)),
                     source=source)
        self.log.append(e)
        self.mem.write(pa, e.data)
        return e

    def map_page(self, pid: int, vpn: int) -> None:
        frame = self.frames.alloc()
        self.aspace.map(pid, _va(vpn), frame * PAGE_SIZE, PAGE_SIZE, user=pid != KERNEL)
        self.data_frames[(pid, vpn)] = frame

    def unmap_page(self, pid: int, vpn: int) -> None:
        self.aspace.unmap(pid, _va(vpn), PAGE_SIZE)
        self.frames.free(self.data_frames.pop((pid, vpn)))

    def remap_page(self, pid: int, vpn: int) -> None:
        frame = self.frames.alloc()
        self.aspace.remap(pid, _va(vpn), frame * PAGE_SIZE)
        self.frames.free(self.data_frames[(pid, vpn)])
        self.data_frames[(pid, vpn)] = frame

    def exit_process(self, pid: int) -> None:
        for key in sorted(k for k in self.data_frames if k[0] == pid):
            self.frames.free(self.data_frames.pop(key))
        self.aspace.destroy_process(pid)

    # -- workload interface ------------------------------------------------------

    def apply(self, op) -> None:
        kind, args = op[1], op[2:]
        g = self.graph
        if kind == "alloc":
            g.alloc_struct(args[0])
        elif kind == "free":
            g.free_struct(args[0])
        elif kind == "field":
            g.write_field(args[0], args[1], args[2])
        elif kind == "ptr":
            g.set_pointer(args[0], args[1], args[2])
        elif kind == "fill":
            region, offset, width, value = args
            self.raw_write(self.region_pa(region, offset), value.to_bytes(width, "little"))
        elif kind == "map":
            self.map_page(*args)
        elif kind == "unmap":
            self.unmap_page(*args)
        elif kind == "remap":
            self.remap_page(*args)
        elif kind == "spawn":
            self.aspace.create_process()
        elif kind == "exit":
            self.exit_process(args[0])
        else:
            raise ValueError(f"unknown operation {kind!r}")

    def shadow(self) -> Shadow:
        sh = Shadow(self.schemas)
        for uid in sorted(self.graph.live):
            s = self.graph.structs[uid]
            sh.add(uid, s.schema.name)
            for fname, dst in sorted(s.pointer_targets.items()):
                if dst is not None:
                    sh.point(uid, fname, dst)
        sh.next_uid = self.graph.next_uid
        sh.next_pid = self.aspace._next_pid
        sh.mapped = {pid: set() for pid in self.aspace.roots}
        for pid, vpn in self.data_frames:
            sh.mapped[pid].add(vpn)
        cfg = self.config
        sh.kernel_window = ((cfg.kernel_base + KWINDOW_OFFSET) >> PAGE_SHIFT, cfg.kernel_window_pages)
        sh.region_sizes = {r: len(self.regions[r]) * PAGE_SIZE for r in ("vmalloc", "global")}
        return sh


def _va(vpn: int) -> int:
    return (vpn << PAGE_SHIFT) & ((1 << 64) - 1)
