"""Independent reference implementations used by the tests.

Nothing here touches ObjectGraph freezing, TrackedStruct histories or the
classifier. The brute-force oracle starts from the raw event list, rebuilds
physical memory byte by byte, and compares extents directly.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from smearlab import events as ev
from smearlab.memory import PAGE_SIZE, AllocationError
from smearlab.objects import parse_schemas
from smearlab.scenarios import Lab

SMALL_SCHEMAS = parse_schemas({"version": 1, "types": [
    {"name": "node", "size": 128, "fields": [
        {"name": "next", "offset": 0, "width": 8, "kind": "pointer", "target": "node"},
        {"name": "prev", "offset": 8, "width": 8, "kind": "pointer", "target": "node"},
        {"name": "item", "offset": 16, "width": 8, "kind": "pointer", "target": "item"},
        {"name": "key", "offset": 24, "width": 8},
        {"name": "flags", "offset": 32, "width": 4},
        {"name": "blob", "offset": 40, "width": 8, "kind": "pointer", "target": "blob"},
        {"name": "tail", "offset": 120, "width": 8}]},
    {"name": "item", "size": 64, "fields": [
        {"name": "owner", "offset": 0, "width": 8, "kind": "pointer", "target": "node"},
        {"name": "val", "offset": 8, "width": 8},
        {"name": "tag", "offset": 16, "width": 2},
        {"name": "b", "offset": 18, "width": 1}]},
    {"name": "blob", "size": 5000, "fields": [
        {"name": "head", "offset": 0, "width": 8, "kind": "pointer", "target": "item"},
        {"name": "a", "offset": 8, "width": 8},
        {"name": "mid", "offset": 2100, "width": 8},
        {"name": "far", "offset": 4200, "width": 8, "kind": "pointer", "target": "node"},
        {"name": "z", "offset": 4992, "width": 8}]},
]})


# --------------------------------------------------------------------------
# brute-force oracle


@dataclass
class _Obj:
    uid: int
    schema: str
    pa: int
    size: int
    alloc: int
    free: int = None
    ptr: dict = field(default_factory=dict)   # field -> [(tick, dst)]

    def live(self, t):
        return self.alloc < t and (self.free is None or t < self.free)


def brute_force(events, schemas, page_count):
    """Verdicts for every captured pointer slot plus the set of T5 uids.

    Returns ({(src_uid, field): kind or None}, {uid: None}).
    """
    mem = bytearray(page_count * PAGE_SIZE)
    objs: dict = {}
    snaps: dict = {}          # dump tick -> full memory copy
    page_tick: dict = {}
    changed = []              # (tick, pa, length) for every byte-changing write
    for e in events:
        if e.kind == ev.ALLOC:
            objs[e.uid] = _Obj(e.uid, e.schema, e.pa, e.size, e.tick)
            mem[e.pa:e.pa + e.size] = bytes(e.size)
        elif e.kind == ev.FREE:
            objs[e.uid].free = e.tick
        elif e.kind == ev.PT_ALLOC:
            mem[e.pa:e.pa + PAGE_SIZE] = bytes(PAGE_SIZE)
        elif e.kind in (ev.WRITE, ev.PT_WRITE):
            if bytes(mem[e.pa:e.pa + len(e.data)]) != e.data:
                changed.append((e.tick, e.pa, len(e.data)))
            mem[e.pa:e.pa + len(e.data)] = e.data
            if e.kind == ev.WRITE and e.field is not None:
                spec = schemas[objs[e.uid].schema].field(e.field)
                if spec.is_pointer:
                    objs[e.uid].ptr.setdefault(e.field, []).append((e.tick, e.dst))
        elif e.kind == ev.DUMP:
            snaps[e.tick] = bytes(mem)
            page_tick[e.page] = e.tick

    def extent(o, t):
        return snaps[t][o.pa:o.pa + o.size]

    verdicts = {}
    for page, t_s in page_tick.items():
        for o in objs.values():
            if not o.live(t_s):
                continue
            for f in schemas[o.schema].pointer_fields:
                if (o.pa + f.offset) // PAGE_SIZE != page:
                    continue
                hist = [(t, d) for t, d in o.ptr.get(f.name, ()) if t < t_s]
                if not hist or hist[-1][1] is None:
                    continue
                d = objs[hist[-1][1]]
                start = hist[-1][0]
                for t, dst in reversed(hist):
                    if dst != d.uid:
                        break
                    start = t
                verdicts[(o.uid, f.name)] = _judge(o, f, d, t_s, page_tick, start, objs, extent)

    t5 = {}
    for o in objs.values():
        first, last = o.pa // PAGE_SIZE, (o.pa + o.size - 1) // PAGE_SIZE
        if first == last:
            continue
        ticks = [page_tick[p] for p in range(first, last + 1)]
        if not all(o.live(t) for t in ticks):
            continue
        lo, hi = min(ticks), max(ticks)
        if any(lo < t < hi and pa < o.pa + o.size and o.pa < pa + n for t, pa, n in changed):
            t5[o.uid] = None
    return verdicts, t5


def _judge(o, f, d, t_s, page_tick, start, objs, extent):
    t_d = page_tick[d.pa // PAGE_SIZE]
    if t_s == t_d:
        return None
    lo, hi = min(t_s, t_d), max(t_s, t_d)
    first = t_s < t_d
    if d.free is not None and d.free < lo:
        return None
    if lo < d.alloc < hi or lo < start < hi:
        return "T1" if first else "T2"
    if d.free is not None and lo < d.free < hi:
        reused = any(x.pa == d.pa and x.schema == d.schema and x.live(hi) for x in objs.values())
        if not reused:
            return "T1" if first else "T2"
    if extent(d, t_s) == extent(d, t_d):
        return None
    return "T3" if first else "T4"


def oracle_verdicts(report):
    """Project an InconsistencyReport onto the brute-force shape."""
    pointer = {(r.src_uid, r.src_field): r.kind for r in report.records if r.kind != "T5"}
    t5 = {r.src_uid: None for r in report.records if r.kind == "T5"}
    return pointer, t5


# --------------------------------------------------------------------------
# random scripts on a small Lab


def random_script(rng: random.Random, pages: int, max_events: int = 200) -> list:
    """A list of abstract ops; indices are resolved against the live set at run time."""
    ops = []
    budget = rng.randint(10, max_events)
    dumps_left = pages
    while budget > 0:
        r = rng.random()
        if r < 0.22:
            ops.append(("alloc", rng.choices(["node", "item", "blob"], [5, 5, 1])[0]))
        elif r < 0.32:
            ops.append(("free", rng.randrange(1 << 16)))
        elif r < 0.55:
            ops.append(("write", rng.randrange(1 << 16), rng.randrange(1 << 16), rng.getrandbits(64)))
        elif r < 0.80:
            ops.append(("point", rng.randrange(1 << 16), rng.randrange(1 << 16),
                        None if rng.random() < 0.1 else rng.randrange(1 << 16)))
        elif dumps_left:
            n = rng.randint(1, 3)
            ops.append(("dump", n))
            dumps_left -= n
        budget -= 1
    return ops


def run_script(ops, pages: int, *, order=None, straddle_prob: float = 0.0, seed: int = 0,
               schemas=SMALL_SCHEMAS, max_events: int = 200) -> Lab:
    """Execute ``ops``; mutations stop once the log could outgrow ``max_events``."""
    lab = Lab(pages, schemas, seed=seed, order=order, straddle_prob=straddle_prob)
    g = lab.graph
    for op in ops:
        live = sorted(g.live)
        room = max_events - len(lab.log) - (pages - len(g.dumped))
        if op[0] != "dump" and room < 2:
            continue
        if op[0] == "alloc":
            if lab.frames.free_count < 4:
                continue
            try:
                lab.alloc(op[1])
            except AllocationError:
                pass
        elif not live:
            continue
        elif op[0] == "free":
            lab.free(live[op[1] % len(live)])
        elif op[0] == "write":
            s = g.structs[live[op[1] % len(live)]]
            data = [f for f in s.schema.fields if not f.is_pointer]
            f = data[op[2] % len(data)]
            lab.write(s.uid, f.name, op[3] & ((1 << (8 * f.width)) - 1))
        elif op[0] == "point":
            s = g.structs[live[op[1] % len(live)]]
            f = s.schema.pointer_fields[op[2] % len(s.schema.pointer_fields)]
            dst = None
            if op[3] is not None:
                fits = [u for u in live if g.structs[u].schema.name == f.target]
                if fits:
                    dst = fits[op[3] % len(fits)]
            lab.point(s.uid, f.name, dst)
        elif op[0] == "dump":
            for _ in range(op[1]):
                if not lab.dumper.done:
                    lab.dump()
    lab.finish()
    return lab


def check_instance(seed: int, pages: int = None):
    """Run one randomized instance; return (mismatches, relations checked)."""
    rng = random.Random(seed)
    pages = pages or rng.randint(4, 24)
    order = list(range(pages))
    if rng.random() < 0.5:
        rng.shuffle(order)
    lab = run_script(random_script(rng, pages), pages, order=order,
                     straddle_prob=rng.choice([0.0, 0.3]), seed=seed)
    report = lab.report()
    got_ptr, got_t5 = oracle_verdicts(report)
    want_all, want_t5 = brute_force(list(lab.log), SMALL_SCHEMAS, pages)
    want_ptr = {k: v for k, v in want_all.items() if v is not None}
    mismatches = []
    if len(lab.log) > 200 or pages > 64:
        mismatches.append((seed, "size", len(lab.log), pages))
    if got_ptr != want_ptr:
        for k in set(got_ptr) | set(want_ptr):
            if got_ptr.get(k) != want_ptr.get(k):
                mismatches.append((seed, k, got_ptr.get(k), want_ptr.get(k)))
    if got_t5 != want_t5:
        mismatches.append((seed, "T5", sorted(got_t5), sorted(want_t5)))
    if report.relations != len(want_all):
        mismatches.append((seed, "relations", report.relations, len(want_all)))
    return mismatches, len(want_all)


# --------------------------------------------------------------------------
# mirrored scripts


MIRROR = {"T1": "T2", "T2": "T1", "T3": "T4", "T4": "T3", None: None}


def mirror_pair(seed: int):
    """Run one S -> D script twice, swapping which of the two pages is dumped first.

    Between the two dumps the script may write D, free D, or free D and let
    a same-type object take its slot; S.f is never retargeted.
    """
    rng = random.Random(seed)
    pages = 8
    action = rng.choice(["none", "write", "write2", "free", "reuse", "write_other"])
    pre = rng.randint(0, 3)
    initial = rng.getrandbits(32)
    verdicts = []
    for swap in (False, True):
        lab = Lab(pages, SMALL_SCHEMAS, seed=seed)
        s = lab.alloc("node")
        d = lab.alloc("item")
        other = lab.alloc("item")
        lab.write(d, "val", initial)
        lab.point(s, "item", d)
        ps, pd = lab.page_of(s), lab.page_of(d)
        rest = [p for p in range(pages) if p not in (ps, pd)]
        random.Random(seed + 1).shuffle(rest)
        first, second = (pd, ps) if swap else (ps, pd)
        lab.dumper.order = rest[:pre] + [first, second] + rest[pre:]
        lab.dump_through(first)
        value = random.Random(seed + 2).getrandbits(32) | 1
        if action in ("write", "write2"):
            lab.write(d, "val", value)
            if action == "write2":
                lab.write(d, "tag", value & 0xFFFF)
        elif action == "free":
            lab.free(d)
        elif action == "reuse":
            lab.free(d)
            again = lab.alloc("item")
            lab.write(again, "val", value)
        elif action == "write_other":
            lab.write(other, "val", value)
        lab.finish()
        rep = lab.report()
        kinds = sorted((r.kind for r in rep.records if r.src_uid == s and r.src_field == "item"),
                       key=str)
        verdicts.append(kinds or [None])
    return action, verdicts[0], verdicts[1]


# --------------------------------------------------------------------------
# page tables: exhaustive enumeration straight from memory


def enumerate_tree(read_u64, root_frame: int, page_count: int) -> dict:
    """{va: pa} for every 4KiB virtual page reachable from ``root_frame``."""
    from smearlab.memory import canonicalize
    out = {}

    def visit(frame, level, prefix):
        for i in range(512):
            value = read_u64(frame * PAGE_SIZE + 8 * i)
            if not value & 1:
                continue
            child = (value & 0x000FFFFFFFFFF000) >> 12
            va = prefix | (i << (12 + 9 * (3 - level)))
            if level == 3 or (level == 2 and value & 0x80):
                n = 1 if level == 3 else 512
                for k in range(n):
                    out[canonicalize(va + k * PAGE_SIZE)] = (child + k) * PAGE_SIZE
            elif child < page_count:
                visit(child, level + 1, va)

    visit(root_frame, 0, 0)
    return out


def random_address_space(seed: int, mem_size: int = None):
    """A kernel space plus a few processes, built and then churned at random."""
    from smearlab.memory import (KERNEL, LARGE_PAGE_SIZE, AddressSpaceError, MappingPlan,
                                 PlanMapping, build_address_space)
    rng = random.Random(seed)
    mem_size = mem_size or rng.choice([2, 4, 8, 16, 64]) << 20
    pages = mem_size // PAGE_SIZE
    base = 0xFFFF800000000000
    maps = []
    for _ in range(rng.randint(0, 6)):
        if rng.random() < 0.3 and mem_size >= 2 * LARGE_PAGE_SIZE:
            n = rng.randint(1, 2)
            frame = 512 * rng.randrange(mem_size // LARGE_PAGE_SIZE - n + 1)
            va = base + (rng.randrange(1, 1 << 16) << 30) + LARGE_PAGE_SIZE * rng.randrange(256)
            maps.append(PlanMapping(va, frame, n, LARGE_PAGE_SIZE))
        else:
            n = rng.randint(1, 40)
            va = base + (rng.randrange(1, 1 << 16) << 30) + PAGE_SIZE * rng.randrange(1 << 18)
            maps.append(PlanMapping(va, rng.randrange(pages - n), n))
    plan = MappingPlan(direct_map=True,
                       direct_map_page_size=rng.choice([PAGE_SIZE, LARGE_PAGE_SIZE]) if
                       mem_size <= (4 << 20) else LARGE_PAGE_SIZE, mappings=[])
    aspace = build_address_space(mem_size, plan)
    for m in maps:
        try:
            aspace.map(KERNEL, m.va, m.frame * PAGE_SIZE, m.pages * m.page_size, m.page_size)
        except AddressSpaceError:
            pass
    pids = []
    for _ in range(rng.randint(0, 3)):
        try:
            pid = aspace.create_process()
        except Exception:
            break
        pids.append(pid)
        for _ in range(rng.randint(1, 4)):
            size = rng.choice([PAGE_SIZE, LARGE_PAGE_SIZE]) if mem_size >= 4 << 20 else PAGE_SIZE
            n = rng.randint(1, 16) if size == PAGE_SIZE else 1
            va = size * rng.randrange((1 << 47) // size - n)
            pa = size * rng.randrange(mem_size // size - n + 1)
            try:
                aspace.map(pid, va, pa, n * size, size, user=True)
            except AddressSpaceError:
                pass
    for _ in range(rng.randint(0, 10)):
        pid = rng.choice([KERNEL, *pids])
        recs = list(aspace.registries[pid])
        if not recs:
            continue
        rec = rng.choice(recs)
        va = rec.va + rec.page_size * rng.randrange(rec.length // rec.page_size)
        try:
            if rng.random() < 0.5:
                aspace.unmap(pid, va, rec.page_size)
            else:
                aspace.remap(pid, va, rec.page_size * rng.randrange(mem_size // rec.page_size))
        except AddressSpaceError:
            pass
    if pids and rng.random() < 0.3:
        aspace.destroy_process(pids.pop())
    return aspace, [KERNEL, *pids]
