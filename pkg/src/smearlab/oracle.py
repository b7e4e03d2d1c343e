"""Ground-truth classification of every pointer relation captured by a dump.

A relation is a pointer slot of a frozen source structure S and the target D
it held when S's page was dumped (tick tS). D's base page was dumped at tD.
Inside the window (lo, hi) = sorted(tS, tD):

* causal (T1 if tS < tD, T2 otherwise): D was allocated or freed inside the
  window, or the current link S -> D was created inside it;
* value (T3 if tS < tD, T4 otherwise): otherwise, D's bytes as seen at tS
  differ from D's bytes as captured at tD.

A free inside the window is treated as a value change when a structure of
the same type occupies D's address again at hi (slab reuse). A pointer that
was already dangling before the window is consistent: both dumps show the
same stale state.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .acquisition import DumpTimeline, dump_tick_of
from .memory import ENTRIES, PAGE_SIZE, AddressSpace, affected_va_size
from .objects import FrozenStruct, ObjectGraph

KINDS = ("T1", "T2", "T3", "T4", "T5")
CAUSAL = "causal"
VALUE = "value"
DETECTABLE = "potentially detectable"
UNDETECTABLE = "undetectable-in-dump"


def category_of(kind: str) -> str:
    if kind in ("T1", "T2"):
        return CAUSAL
    if kind in ("T3", "T4", "T5"):
        return VALUE
    raise ValueError(f"unknown inconsistency kind {kind!r}")


def detectability(kind: str) -> str:
    return DETECTABLE if category_of(kind) == CAUSAL else UNDETECTABLE


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class InconsistencyRecord:
    kind: str
    src_uid: int
    src_field: Optional[str]
    dst_uid: Optional[int]
    src_dump_tick: int
    dst_dump_tick: int
    src_schema: str = ""
    dst_schema: str = ""
    level: Optional[int] = None
    detail: tuple = ()

    def __post_init__(self):
        category_of(self.kind)
        if self.kind in ("T1", "T3") and not self.src_dump_tick < self.dst_dump_tick:
            raise OracleError(f"{self.kind} needs the source dumped first")
        if self.kind in ("T2", "T4") and not self.dst_dump_tick < self.src_dump_tick:
            raise OracleError(f"{self.kind} needs the destination dumped first")

    @property
    def category(self) -> str:
        return category_of(self.kind)

    @property
    def detectability(self) -> str:
        return detectability(self.kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "category": self.category, "detectability": self.detectability,
                "src_uid": self.src_uid, "src_field": self.src_field, "dst_uid": self.dst_uid,
                "src_schema": self.src_schema, "dst_schema": self.dst_schema,
                "src_dump_tick": self.src_dump_tick, "dst_dump_tick": self.dst_dump_tick,
                "level": self.level, "detail": dict(self.detail)}


def _inside(t: Optional[int], lo: int, hi: int) -> bool:
    return t is not None and lo < t < hi


def link_start(history: list, dst, tick: int) -> Optional[int]:
    """Tick at which the uninterrupted link to ``dst`` current at ``tick`` began."""
    start = None
    for t, target in history:
        if t > tick:
            break
        if target == dst:
            if start is None:
                start = t
        else:
            start = None
    return start


def _window_verdict(t_src, t_dst, alloc_tick, free_tick, established, reused_at_hi):
    """'consistent', 'causal' or 'value' for one relation (shared by structs and tables)."""
    if t_src == t_dst:
        return "consistent"
    lo, hi = sorted((t_src, t_dst))
    if free_tick is not None and free_tick < lo:
        return "consistent"
    born = _inside(alloc_tick, lo, hi)
    died = _inside(free_tick, lo, hi)
    linked = _inside(established, lo, hi)
    if born or linked:
        return "causal"
    if died:
        return "value" if reused_at_hi() else "causal"
    return "value"


def _kind(category: str, t_src: int, t_dst: int) -> str:
    if category == "causal":
        return "T1" if t_src < t_dst else "T2"
    return "T3" if t_src < t_dst else "T4"


def classify_relation(frozen_src: FrozenStruct, field_name: str, graph: ObjectGraph,
                      timeline: DumpTimeline) -> Optional[InconsistencyRecord]:
    """Verdict for one frozen pointer: None when consistent, else a record."""
    snap = frozen_src.targets.get(field_name)
    if snap is None:
        raise OracleError(f"uid {frozen_src.uid} has no frozen target for {field_name!r}")
    try:
        src = graph.structs[frozen_src.uid]
        dst = graph.structs[snap.uid]
    except KeyError as exc:
        raise OracleError(f"no history for uid {exc.args[0]}") from None
    spec = src.schema.field(field_name)
    t_src = dump_tick_of(timeline, src.base_pa + spec.offset)
    t_dst = dump_tick_of(timeline, dst.base_pa)
    hi = max(t_src, t_dst)
    established = link_start(src.pointer_history.get(field_name, ()), dst.uid, t_src)

    def reused() -> bool:
        r = graph.struct_at(dst.base_pa, hi)
        return r is not None and r.schema.name == dst.schema.name

    verdict = _window_verdict(t_src, t_dst, dst.alloc_tick, dst.free_tick, established, reused)
    if verdict == "consistent":
        return None
    detail = {}
    if verdict == "value":
        captured = _captured_extent(graph, dst, t_dst)
        if captured is None:
            raise OracleError(f"uid {dst.uid} was not captured at tick {t_dst}")
        if captured == snap.image:
            return None
        detail["changed_bytes"] = sum(a != b for a, b in zip(captured, snap.image))
        replaced = graph.struct_at(dst.base_pa, hi)
        if replaced is not None and replaced.uid != dst.uid:
            detail["replaced_by"] = replaced.uid
    else:
        if _inside(dst.free_tick, *sorted((t_src, t_dst))):
            detail["trigger"] = "free"
        elif _inside(dst.alloc_tick, *sorted((t_src, t_dst))):
            detail["trigger"] = "alloc"
        else:
            detail["trigger"] = "link"
    return InconsistencyRecord(_kind(verdict, t_src, t_dst), src.uid, field_name, dst.uid,
                               t_src, t_dst, src.schema.name, dst.schema.name, None,
                               tuple(sorted(detail.items())))


def _captured_extent(graph: ObjectGraph, dst, t_dst: int) -> Optional[bytes]:
    """D's extent as frozen at its base page (from D or whatever lived there)."""
    page = dst.base_pa // PAGE_SIZE
    for s in graph.history_at(dst.base_pa):
        fz = graph.frozen.get((s.uid, page))
        if fz is not None and fz.dump_tick == t_dst:
            if s.schema.size == dst.schema.size:
                return fz.image
    return None


def detect_type5(fragments: list, graph: ObjectGraph,
                 timeline: DumpTimeline) -> Optional[InconsistencyRecord]:
    """T5 when a multi-page structure changed between its first and last page dump."""
    if not fragments:
        return None
    s = graph.structs[fragments[0].uid]
    pages = list(s.pages)
    if len(pages) < 2 or len(fragments) < len(pages):
        return None
    ticks = [timeline.page_ticks[p] for p in pages]
    t_min, t_max = min(ticks), max(ticks)
    hits = [(t, off, w) for t, off, w in s.changes if t_min < t < t_max]
    if not hits:
        return None
    touched = sorted({f.name for f in s.schema.fields for _, off, w in hits
                      if f.offset < off + w and off < f.offset + f.width})
    detail = (("fields", tuple(touched)), ("pages", tuple(pages)), ("writes", len(hits)))
    return InconsistencyRecord("T5", s.uid, None, s.uid, t_min, t_max, s.schema.name,
                               s.schema.name, None, detail)


# --------------------------------------------------------------------------
# whole-dump report


@dataclass
class InconsistencyReport:
    records: list
    relations: int
    instances: dict          # schema -> unique uids captured in the dump
    totals: dict = field(default_factory=dict)
    per_schema: dict = field(default_factory=dict)
    per_field: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"relations": self.relations, "totals": self.totals,
                "instances": self.instances, "per_schema": self.per_schema,
                "per_field": {f"{s}.{f}": c for (s, f), c in sorted(self.per_field.items())},
                "detectability": {k: detectability(k) for k in KINDS},
                "records": [r.to_dict() for r in self.records]}


def iter_relations(graph: ObjectGraph):
    """(frozen fragment, field) for every pointer slot captured with a target."""
    for (uid, page), fz in sorted(graph.frozen.items()):
        schema = graph.schemas[fz.schema]
        for f in fz.fields_on_page(schema):
            if f.is_pointer and f.name in fz.targets:
                yield fz, f.name


def analyze_dump(graph: ObjectGraph, timeline: DumpTimeline) -> InconsistencyReport:
    records = []
    relations = 0
    fragments: dict[int, list] = {}
    for fz in graph.frozen.values():
        fragments.setdefault(fz.uid, []).append(fz)
    for fz, name in iter_relations(graph):
        relations += 1
        rec = classify_relation(fz, name, graph, timeline)
        if rec is not None:
            records.append(rec)
    for uid in sorted(fragments):
        rec = detect_type5(fragments[uid], graph, timeline)
        if rec is not None:
            records.append(rec)
    records.sort(key=lambda r: (r.src_uid, r.src_field or "", r.kind))

    instances = Counter(graph.structs[uid].schema.name for uid in fragments)
    totals = {k: 0 for k in KINDS}
    per_schema = {name: {"instances": instances.get(name, 0), **{k: 0 for k in KINDS},
                         "affected": 0, "percent_affected": 0.0}
                  for name in graph.schemas}
    per_field: dict = {}
    affected: dict[str, set] = {}
    for r in records:
        totals[r.kind] += 1
        per_schema[r.src_schema][r.kind] += 1
        if r.kind != "T5":
            affected.setdefault(r.src_schema, set()).add(r.src_uid)
        key = (r.src_schema, r.src_field or "*")
        per_field.setdefault(key, {k: 0 for k in KINDS})[r.kind] += 1
    for name, row in per_schema.items():
        row["affected"] = len(affected.get(name, ()))
        if row["instances"]:
            row["percent_affected"] = 100.0 * row["affected"] / row["instances"]
    return InconsistencyReport(records, relations, dict(sorted(instances.items())), totals,
                               per_schema, per_field)


# --------------------------------------------------------------------------
# page-table smearing


@dataclass
class SmearingReport:
    records: list
    relations: int = 0
    totals: dict = field(default_factory=dict)
    per_level: dict = field(default_factory=dict)
    per_process: dict = field(default_factory=dict)  # pid -> {"records", "affected_va"}
    cross_process: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.records)

    def to_dict(self) -> dict:
        return {"relations": self.relations, "totals": self.totals,
                "per_level": {str(k): v for k, v in self.per_level.items()},
                "per_process": {str(k): v for k, v in sorted(self.per_process.items())},
                "cross_process": [r.to_dict() for r in self.cross_process],
                "records": [r.to_dict() for r in self.records]}


def _entries_differing(a: bytes, b: bytes) -> int:
    return sum(a[i:i + 8] != b[i:i + 8] for i in range(0, PAGE_SIZE, 8))


def classify_table_link(ft, index: int, aspace: AddressSpace, timeline: DumpTimeline,
                        image: bytes) -> Optional[InconsistencyRecord]:
    """Same window rules with a table frame as the structure and an entry as the pointer."""
    child_uid, snap = ft.targets[index]
    parent = aspace.tables[ft.uid]
    child = aspace.tables[child_uid]
    t_src = ft.dump_tick
    t_dst = timeline.page_ticks[child.frame]
    hi = max(t_src, t_dst)
    established = link_start(parent.links.get(index, ()), child_uid, t_src)

    def reused() -> bool:
        return any(t.frame == child.frame and t.level == child.level and t.live_at(hi)
                   for t in aspace.tables.values())

    verdict = _window_verdict(t_src, t_dst, child.alloc_tick, child.free_tick, established, reused)
    if verdict == "consistent":
        return None
    owner = parent.owner
    if verdict == "value":
        captured = bytes(image[child.frame * PAGE_SIZE:(child.frame + 1) * PAGE_SIZE])
        n = _entries_differing(captured, snap)
        if n == 0:
            return None
        level = child.level
        va = affected_va_size(level) * n
        detail = {"entries": n}
    else:
        level = parent.level
        va = affected_va_size(level)
        detail = {"entries": 1}
    detail.update(index=index, owner=owner, affected_va=va, child_frame=child.frame)
    captured_owner = _captured_owner(aspace, child.frame, t_dst)
    if captured_owner is not None and captured_owner not in (0, owner) and owner != 0:
        detail["captured_owner"] = captured_owner
    return InconsistencyRecord(_kind(verdict, t_src, t_dst), ft.uid, f"entry[{index}]", child_uid,
                               t_src, t_dst, f"pt{parent.level}", f"pt{child.level}", level,
                               tuple(sorted(detail.items())))


def _captured_owner(aspace: AddressSpace, frame: int, tick: int) -> Optional[int]:
    for t in aspace.tables.values():
        if t.frame == frame and t.live_at(tick):
            return t.owner
    return None


def smearing_report(image: bytes, timeline: DumpTimeline, aspace: AddressSpace) -> SmearingReport:
    records = []
    relations = 0
    for page in sorted(aspace.frozen):
        ft = aspace.frozen[page]
        for index in sorted(ft.targets):
            relations += 1
            rec = classify_table_link(ft, index, aspace, timeline, image)
            if rec is not None:
                records.append(rec)
    totals = {k: 0 for k in KINDS[:4]}
    per_level = {lvl: 0 for lvl in range(4)}
    per_process: dict = {}
    cross = []
    for r in records:
        d = dict(r.detail)
        totals[r.kind] += 1
        per_level[r.level] += 1
        row = per_process.setdefault(d["owner"], {"records": 0, "affected_va": 0})
        row["records"] += 1
        row["affected_va"] += d["affected_va"]
        if "captured_owner" in d:
            cross.append(r)
    return SmearingReport(records, relations, totals, per_level, per_process, cross)


def table_span(level: int) -> int:
    """Virtual bytes a whole table at ``level`` covers."""
    return affected_va_size(level) * ENTRIES
