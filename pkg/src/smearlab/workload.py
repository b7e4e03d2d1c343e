"""Seeded kernel-activity streams parameterized by per-OS profiles.

A stream is a list of symbolic operations ``(tick, kind, *args)``. The
generator keeps a shadow of the world (live uids, processes, mapped pages)
so every operation is valid when the world replays it at its tick. Uids and
pids are predicted from the world's counters, which both assign
sequentially.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, asdict, replace
from typing import Optional

import numpy as np

from .memory import Placement

SIZES = (1, 2, 4, 8)
REGIONS = ("direct_map", "vmalloc", "global", "page_table")

# idle-kernel write operations per minute, in millions
IDLE_WRITES = {"linux": 1242, "windows": 3885, "vxworks": 29}
# writes per tick = millions-per-minute * RATE_SCALE
RATE_SCALE = 1e-3

# user-space address windows (first vpn, page count) a process maps into
USER_WINDOWS = ((0x400, 256), (0x10000, 256), (0x7F0000000, 256), (0x7FFFFFF00, 256))
KERNEL_PID = 0


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    writes_per_tick: float
    write_size_mix: dict
    region_mix: dict
    placement: Placement
    alloc_churn: float = 0.03
    pt_churn: float = 0.002
    pointer_fraction: float = 0.3
    unlink_prob: float = 0.9

    def __post_init__(self):
        for label, mix, keys in (("write_size_mix", self.write_size_mix, SIZES),
                                 ("region_mix", self.region_mix, REGIONS)):
            if set(mix) != set(keys):
                raise ProfileError(f"{label} must cover exactly {keys}")
            if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ProfileError(f"{label} must be a distribution, got {mix}")
        for name in ("writes_per_tick", "alloc_churn", "pt_churn"):
            if getattr(self, name) < 0:
                raise ProfileError(f"{name} must be >= 0")
        if not 0 <= self.pointer_fraction <= 1 or not 0 <= self.unlink_prob <= 1:
            raise ProfileError("fractions must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = self.placement.value
        d["write_size_mix"] = {str(k): v for k, v in self.write_size_mix.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadProfile":
        d = dict(d)
        d["placement"] = Placement(d["placement"])
        d["write_size_mix"] = {int(k): float(v) for k, v in d["write_size_mix"].items()}
        return cls(**d)

    def with_overrides(self, **kw) -> "WorkloadProfile":
        if "placement" in kw:
            kw["placement"] = Placement(kw["placement"])
        if "write_size_mix" in kw:
            kw["write_size_mix"] = {int(k): float(v) for k, v in kw["write_size_mix"].items()}
        return replace(self, **kw)


def _size_mix(p1: float, p2: float, p4: float, p8: float) -> dict:
    # keep the 8-byte share exact, spread rounding residue over the rest
    rest = 1.0 - p8
    small = p1 + p2 + p4
    mix = {1: p1 * rest / small, 2: p2 * rest / small, 4: p4 * rest / small}
    mix[8] = 1.0 - sum(mix.values())
    return mix


_LINUX_REGIONS = {"vmalloc": 0.6203, "direct_map": 0.3328, "page_table": 0.0167, "global": 0.0302}

_PROFILES = {
    "linux": (_size_mix(0.0211, 0.0036, 0.0998, 0.875), Placement.CHUNKED),
    "windows": (_size_mix(0.0662, 0.0355, 0.1190, 0.7793), Placement.SCATTERED),
    "vxworks": (_size_mix(0.0112, 0.0071, 0.1914, 0.7890), Placement.CONTIGUOUS),
}


def os_profile(name: str) -> WorkloadProfile:
    try:
        sizes, placement = _PROFILES[name]
    except KeyError:
        raise ProfileError(f"unknown profile {name!r}; expected one of {sorted(_PROFILES)}") from None
    # structural churn scales with overall activity so it never swamps the size mix
    activity = IDLE_WRITES[name] / IDLE_WRITES["linux"]
    return WorkloadProfile(name, IDLE_WRITES[name] * RATE_SCALE, dict(sizes), dict(_LINUX_REGIONS),
                           placement, alloc_churn=0.03 * activity, pt_churn=0.002 * activity)


def profile_names() -> list:
    return sorted(_PROFILES)


# --------------------------------------------------------------------------
# shadow state and generation


@dataclass
class Shadow:
    """What the generator needs to know about the world to emit valid ops."""
    schemas: dict
    live: dict = field(default_factory=dict)          # schema -> list of uids
    where: dict = field(default_factory=dict)         # uid -> schema
    pointers: dict = field(default_factory=dict)      # (uid, field) -> dst
    incoming: dict = field(default_factory=dict)      # dst -> set((uid, field))
    next_uid: int = 1
    mapped: dict = field(default_factory=dict)        # pid -> set of vpns
    next_pid: int = 1
    kernel_window: tuple = (0, 0)
    region_sizes: dict = field(default_factory=dict)  # fill region -> bytes

    def add(self, uid: int, schema: str) -> None:
        self.live.setdefault(schema, []).append(uid)
        self.where[uid] = schema

    def remove(self, uid: int) -> None:
        schema = self.where.pop(uid)
        lst = self.live[schema]
        lst.remove(uid)
        for key in [k for k in self.pointers if k[0] == uid]:
            self._unset(key)
        self.incoming.pop(uid, None)

    def _unset(self, key) -> None:
        dst = self.pointers.pop(key, None)
        if dst is not None and dst in self.incoming:
            self.incoming[dst].discard(key)

    def point(self, uid: int, fname: str, dst: Optional[int]) -> None:
        key = (uid, fname)
        self._unset(key)
        if dst is not None:
            self.pointers[key] = dst
            self.incoming.setdefault(dst, set()).add(key)


@dataclass
class EventStream:
    ops: list
    seed: int
    profile: WorkloadProfile
    duration: int

    def __len__(self) -> int:
        return len(self.ops)

    def to_bytes(self) -> bytes:
        return json.dumps({"seed": self.seed, "profile": self.profile.to_dict(),
                           "duration": self.duration, "ops": self.ops},
                          sort_keys=True, separators=(",", ":")).encode()

    def write_widths(self) -> list:
        """Width of every sized write op (field, pointer and fill writes)."""
        out = []
        for op in self.ops:
            if op[1] == "field":
                out.append(op[5])
            elif op[1] == "ptr":
                out.append(8)
            elif op[1] == "fill":
                out.append(op[4])
        return out

    def write_regions(self) -> list:
        """Region of every write-carrying op, page-table edits included."""
        return [r for r in (op_region(op[1:]) for op in self.ops) if r is not None]


def op_region(op) -> Optional[str]:
    """Region a write-carrying op lands in (op given without its tick)."""
    kind = op[0]
    if kind in ("field", "ptr"):
        return "direct_map"
    if kind == "fill":
        return op[1]
    if kind in ("map", "unmap", "remap"):
        return "page_table"
    return None


class _Generator:
    def __init__(self, profile: WorkloadProfile, seed: int, shadow: Shadow):
        self.p = profile
        self.rng = random.Random(seed)
        self.np = np.random.default_rng(seed)
        self.sh = shadow
        self.ops: list = []
        schemas = shadow.schemas
        self.by_width = {w: [s for s in schemas.values()
                             if any(f.width == w and not f.is_pointer for f in s.fields)]
                         for w in SIZES}
        self.with_ptr = [s for s in schemas.values() if s.pointer_fields]
        self.targets_of = {}
        for s in schemas.values():
            for f in s.pointer_fields:
                self.targets_of.setdefault(f.target, []).append((s.name, f.name))
        self.alloc_names = [s.name for s in schemas.values()]
        self.alloc_weights = [max(1, s.instances) for s in schemas.values()]
        self.sizes = list(SIZES)
        self.size_w = [profile.write_size_mix[w] for w in SIZES]
        self.width_counts = {w: 0 for w in SIZES}
        self.regions = list(REGIONS)
        self.region_w = [profile.region_mix[r] for r in REGIONS]
        self.region_counts = {r: 0 for r in REGIONS}

    def emit(self, tick, *op):
        self.ops.append([tick, *op])
        width = {"field": 4, "ptr": None, "fill": 3}.get(op[0], -1)
        if width != -1:
            self.width_counts[8 if width is None else op[width]] += 1
        region = op_region(op)
        if region is not None:
            self.region_counts[region] += 1

    @staticmethod
    def _steer(counts: dict, keys: list, weights: list) -> list:
        n = sum(counts.values()) + 1
        deficit = [max(0.0, w * n - counts[k]) for k, w in zip(keys, weights)]
        return deficit if any(deficit) else weights

    def draw_width(self) -> int:
        """Sample a width, steering toward the profile mix.

        Allocation and unlink traffic add 8-byte pointer writes outside the
        sampler; weighting each class by its current deficit keeps the whole
        stream's size mix on the profile.
        """
        weights = self._steer(self.width_counts, self.sizes, self.size_w)
        return self.rng.choices(self.sizes, weights)[0]

    def draw_region(self) -> str:
        weights = self._steer(self.region_counts, self.regions, self.region_w)
        return self.rng.choices(self.regions, weights)[0]

    def _pick_live(self, candidates) -> Optional[tuple]:
        weights = [len(self.sh.live.get(s.name, ())) for s in candidates]
        if not any(weights):
            return None
        schema = self.rng.choices(candidates, weights)[0]
        return schema, self.rng.choice(self.sh.live[schema.name])

    def _random_target(self, target: Optional[str]) -> Optional[int]:
        pool = self.sh.live.get(target, ()) if target else list(self.sh.where)
        return self.rng.choice(pool) if pool else None

    def struct_write(self, tick, width) -> None:
        if width == 8 and self.rng.random() < self.p.pointer_fraction:
            got = self._pick_live(self.with_ptr)
            if got is not None:
                schema, uid = got
                f = self.rng.choice(schema.pointer_fields)
                dst = self._random_target(f.target)
                self.sh.point(uid, f.name, dst)
                self.emit(tick, "ptr", uid, f.name, dst)
                return
        got = self._pick_live(self.by_width[width])
        if got is None:
            self.fill_write(tick, "global", width)
            return
        schema, uid = got
        f = self.rng.choice([f for f in schema.fields if f.width == width and not f.is_pointer])
        self.emit(tick, "field", uid, f.name, self.rng.getrandbits(8 * width), width)

    def fill_write(self, tick, region, width) -> None:
        size = self.sh.region_sizes.get(region, 0)
        if size < width:
            return
        slot = self.rng.randrange(size // width) * width
        self.emit(tick, "fill", region, slot, width, self.rng.getrandbits(8 * width))

    def alloc(self, tick) -> None:
        name = self.rng.choices(self.alloc_names, self.alloc_weights)[0]
        uid = self.sh.next_uid
        self.sh.next_uid += 1
        self.emit(tick, "alloc", name)
        self.sh.add(uid, name)
        for f in self.sh.schemas[name].pointer_fields:
            dst = self._random_target(f.target)
            if dst is not None and dst != uid:
                self.sh.point(uid, f.name, dst)
                self.emit(tick, "ptr", uid, f.name, dst)
        # link the newcomer into one existing referrer
        referrers = [(s, fn) for s, fn in self.targets_of.get(name, ()) if self.sh.live.get(s)]
        if referrers:
            s, fn = self.rng.choice(referrers)
            src = self.rng.choice(self.sh.live[s])
            if src != uid:
                self.sh.point(src, fn, uid)
                self.emit(tick, "ptr", src, fn, uid)

    def free(self, tick) -> None:
        if not self.sh.where:
            return
        uid = self.rng.choice(sorted(self.sh.where))
        for src, fn in sorted(self.sh.incoming.get(uid, ())):
            if src != uid and self.rng.random() < self.p.unlink_prob:
                self.sh.point(src, fn, None)
                self.emit(tick, "ptr", src, fn, None)
        self.sh.remove(uid)
        self.emit(tick, "free", uid)

    def pt_op(self, tick) -> None:
        pids = sorted(self.sh.mapped)
        if not pids:
            return
        pid = self.rng.choice(pids)
        mapped = self.sh.mapped[pid]
        if pid == KERNEL_PID:
            first, count = self.sh.kernel_window
            windows = ((first, count),)
        else:
            windows = USER_WINDOWS
        r = self.rng.random()
        if mapped and r < 0.4:
            vpn = self.rng.choice(sorted(mapped))
            self.emit(tick, "remap", pid, vpn)
        elif mapped and r < 0.7:
            vpn = self.rng.choice(sorted(mapped))
            mapped.discard(vpn)
            self.emit(tick, "unmap", pid, vpn)
        else:
            first, count = self.rng.choice(windows)
            if count == 0:
                return
            vpn = first + self.rng.randrange(count)
            if vpn not in mapped:
                mapped.add(vpn)
                self.emit(tick, "map", pid, vpn)

    def spawn(self, tick, pages: int = 4) -> None:
        pid = self.sh.next_pid
        self.sh.next_pid += 1
        self.emit(tick, "spawn")
        mapped = self.sh.mapped.setdefault(pid, set())
        for _ in range(pages):
            first, count = self.rng.choice(USER_WINDOWS)
            vpn = first + self.rng.randrange(count)
            if vpn not in mapped:
                mapped.add(vpn)
                self.emit(tick, "map", pid, vpn)

    def exit(self, tick) -> None:
        pids = [p for p in self.sh.mapped if p != KERNEL_PID]
        if len(pids) <= 2:
            return
        pid = self.rng.choice(sorted(pids))
        del self.sh.mapped[pid]
        self.emit(tick, "exit", pid)

    def run(self, duration: int) -> list:
        if duration <= 0:
            return self.ops
        n_writes = self.np.poisson(self.p.writes_per_tick, duration)
        n_churn = self.np.poisson(self.p.alloc_churn, duration)
        n_pt = self.np.poisson(self.p.pt_churn, duration)
        for tick in range(duration):
            for _ in range(int(n_writes[tick])):
                region = self.draw_region()
                if region == "page_table":
                    self.pt_op(tick)
                    continue
                width = self.draw_width()
                if region == "direct_map":
                    self.struct_write(tick, width)
                else:
                    self.fill_write(tick, region, width)
            for _ in range(int(n_churn[tick])):
                if self.rng.random() < 0.5:
                    self.alloc(tick)
                else:
                    self.free(tick)
            for _ in range(int(n_pt[tick])):
                if self.rng.random() < 0.5:
                    self.spawn(tick)
                else:
                    self.exit(tick)
        return self.ops


def generate_events(profile: WorkloadProfile, duration_ticks: int, seed: int,
                    world=None) -> EventStream:
    """Generate ``duration_ticks`` ticks of activity valid against ``world``.

    ``world`` may be None (an empty machine) or anything with a ``shadow()``
    method returning a fresh :class:`Shadow`.
    """
    if duration_ticks < 0:
        raise ValueError("duration must be >= 0")
    if world is None:
        from .objects import load_schemas
        shadow = Shadow(load_schemas())
    else:
        shadow = world.shadow()
    ops = _Generator(profile, seed, shadow).run(duration_ticks)
    return EventStream(ops, seed, profile, duration_ticks)
