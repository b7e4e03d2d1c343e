"""Schema-driven kernel objects placed in physical memory.

Every structure gets a uid that is never reused, even when the slab hands
the same address to a new object. Field writes go through the graph so that
each one is versioned and logged; ``freeze_page`` records what a page dump
saw, including one-hop snapshots of every pointed-to structure.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from . import events as ev
from .memory import PAGE_SIZE, FrameAllocator, PhysicalMemory

DATA = "data"
POINTER = "pointer"
# written over the first 8 bytes of a freed object, like a slab free pointer
FREE_POISON = bytes([0x6B]) * 8
SLAB_ALIGN = 8


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    offset: int
    width: int
    kind: str = DATA
    target: Optional[str] = None
    forensic_relevant: bool = False

    @property
    def is_pointer(self) -> bool:
        return self.kind == POINTER


@dataclass(frozen=True)
class StructSchema:
    name: str
    size: int
    fields: tuple
    instances: int = 1

    def __post_init__(self):
        spans = []
        for f in self.fields:
            if f.width not in (1, 2, 4, 8):
                raise ValueError(f"{self.name}.{f.name}: width must be 1, 2, 4 or 8")
            if f.kind not in (DATA, POINTER):
                raise ValueError(f"{self.name}.{f.name}: unknown kind {f.kind!r}")
            if f.is_pointer and f.width != 8:
                raise ValueError(f"{self.name}.{f.name}: pointer fields are 8 bytes")
            if f.offset < 0 or f.offset + f.width > self.size:
                raise ValueError(f"{self.name}.{f.name} does not fit in {self.size} bytes")
            spans.append((f.offset, f.offset + f.width, f.name))
        spans.sort()
        for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError(f"{self.name}: fields {an} and {bn} overlap")

    def field(self, name: str) -> FieldSpec:
        for f in self.fields:
            if f.name == name:
                return f
        raise GraphError(f"{self.name} has no field {name!r}")

    def has_field(self, name: str) -> bool:
        return any(f.name == name for f in self.fields)

    @property
    def pointer_fields(self) -> tuple:
        return tuple(f for f in self.fields if f.is_pointer)


def parse_schemas(doc: dict) -> dict:
    schemas = {}
    for t in doc["types"]:
        fields = tuple(FieldSpec(f["name"], int(f["offset"]), int(f["width"]), f.get("kind", DATA),
                                 f.get("target"), bool(f.get("forensic_relevant", False)))
                       for f in t["fields"])
        schemas[t["name"]] = StructSchema(t["name"], int(t["size"]), fields, int(t.get("instances", 1)))
    for s in schemas.values():
        for f in s.pointer_fields:
            if f.target is not None and f.target not in schemas:
                raise ValueError(f"{s.name}.{f.name} targets unknown type {f.target!r}")
    return schemas


def schemas_to_doc(schemas: dict) -> dict:
    types = []
    for s in schemas.values():
        fields = []
        for f in s.fields:
            d = {"name": f.name, "offset": f.offset, "width": f.width, "kind": f.kind}
            if f.target is not None:
                d["target"] = f.target
            if f.forensic_relevant:
                d["forensic_relevant"] = True
            fields.append(d)
        types.append({"name": s.name, "size": s.size, "instances": s.instances, "fields": fields})
    return {"version": 1, "types": types}


def load_schemas(path: Union[str, Path, None] = None) -> dict:
    """Load a schema file; the packaged default has the 17 tracked kernel types."""
    if path is None:
        text = resources.files("smearlab.data").joinpath("schema.json").read_text()
    else:
        text = Path(path).read_text()
    return parse_schemas(json.loads(text))


@dataclass
class TrackedStruct:
    uid: int
    schema: StructSchema
    base_pa: int
    alloc_tick: int
    free_tick: Optional[int] = None
    version: int = 0
    pointer_targets: dict = field(default_factory=dict)
    # field -> [(tick, dst uid or None)]
    pointer_history: dict = field(default_factory=dict)
    # [(tick, offset, width)] for every byte-changing write inside the extent
    changes: list = field(default_factory=list)

    @property
    def end_pa(self) -> int:
        return self.base_pa + self.schema.size

    @property
    def pages(self) -> range:
        return range(self.base_pa // PAGE_SIZE, (self.end_pa - 1) // PAGE_SIZE + 1)

    def live_at(self, tick: int) -> bool:
        return self.alloc_tick < tick and (self.free_tick is None or tick < self.free_tick)

    def established(self, field_name: str, tick: int) -> tuple:
        """(tick the pointer got its value as of ``tick``, target uid)."""
        best = (None, None)
        for t, dst in self.pointer_history.get(field_name, ()):
            if t > tick:
                break
            best = (t, dst)
        return best


@dataclass(frozen=True)
class TargetSnapshot:
    uid: int
    schema: str
    base_pa: int
    image: bytes


@dataclass(frozen=True)
class FrozenStruct:
    uid: int
    schema: str
    base_pa: int
    page: int
    dump_tick: int
    image: bytes
    captured_pages: tuple
    partial: bool
    targets: dict  # field name -> TargetSnapshot

    def fields_on_page(self, schema: StructSchema) -> list:
        lo = self.page * PAGE_SIZE - self.base_pa
        return [f for f in schema.fields if lo <= f.offset < lo + PAGE_SIZE]


def encode_value(spec: FieldSpec, value: Union[int, bytes]) -> bytes:
    if isinstance(value, (bytes, bytearray)):
        if len(value) != spec.width:
            raise GraphError(f"{spec.name}: expected {spec.width} bytes, got {len(value)}")
        return bytes(value)
    if not 0 <= value < 1 << (8 * spec.width):
        raise GraphError(f"{spec.name}: value {value:#x} does not fit in {spec.width} bytes")
    return int(value).to_bytes(spec.width, "little")


def _slab_stride(schema: StructSchema, size: Optional[int] = None) -> int:
    # objects sit on 8-byte boundaries so pointer slots stay word aligned
    size = schema.size if size is None else size
    return (size + SLAB_ALIGN - 1) & ~(SLAB_ALIGN - 1)


class ObjectGraph:
    def __init__(self, mem: PhysicalMemory, schemas: Optional[dict] = None, *,
                 frames: Optional[FrameAllocator] = None, log: Optional[ev.EventLog] = None,
                 kernel_base: int = 0xFFFF800000000000, straddle_prob: float = 0.001,
                 seed: int = 0):
        self.mem = mem
        self.schemas = schemas if schemas is not None else load_schemas()
        self.frames = frames or FrameAllocator(mem.page_count)
        self.log = log if log is not None else ev.EventLog()
        self.kernel_base = kernel_base
        self.straddle_prob = straddle_prob
        self.rng = random.Random(seed)
        self.structs: dict[int, TrackedStruct] = {}
        self.live: set = set()
        self.page_index: dict[int, set] = {}
        self.by_base: dict[int, list] = {}
        self.frozen: dict[tuple, FrozenStruct] = {}
        self.dumped: dict[int, int] = {}
        self._slots: dict[str, list] = {}
        self._next_uid = 1

    @property
    def next_uid(self) -> int:
        return self._next_uid

    def va_of(self, uid: int) -> int:
        return self.kernel_base + self.structs[uid].base_pa

    def get(self, uid: int) -> TrackedStruct:
        try:
            return self.structs[uid]
        except KeyError:
            raise GraphError(f"unknown uid {uid}") from None

    def _live(self, uid: int) -> TrackedStruct:
        s = self.get(uid)
        if s.free_tick is not None:
            raise GraphError(f"uid {uid} ({s.schema.name}) was freed at tick {s.free_tick}")
        return s

    # -- placement -------------------------------------------------------

    def _place(self, schema: StructSchema) -> int:
        if schema.size > PAGE_SIZE:
            n = -(-schema.size // PAGE_SIZE)
            return self.frames.alloc(n) * PAGE_SIZE
        slots = self._slots.setdefault(schema.name, [])
        if slots:
            return slots.pop()
        stride = _slab_stride(schema)
        if self.straddle_prob and self.rng.random() < self.straddle_prob:
            frame = self.frames.alloc(2)
            return frame * PAGE_SIZE + PAGE_SIZE - _slab_stride(schema, schema.size // 2)
        frame = self.frames.alloc()
        per_page = PAGE_SIZE // stride
        slots.extend(frame * PAGE_SIZE + k * stride for k in reversed(range(1, per_page)))
        return frame * PAGE_SIZE

    # -- lifecycle -------------------------------------------------------

    def alloc_struct(self, schema: Union[str, StructSchema]) -> TrackedStruct:
        schema = self.schemas[schema] if isinstance(schema, str) else schema
        base = self._place(schema)
        e = self.log.append(ev.Event(ev.ALLOC, uid=self._next_uid, pa=base, schema=schema.name,
                                     size=schema.size))
        return self._restore_alloc(e)

    def _restore_alloc(self, e: ev.Event) -> TrackedStruct:
        schema = self.schemas[e.schema]
        if e.uid in self.structs:
            raise GraphError(f"uid {e.uid} reused")
        s = TrackedStruct(e.uid, schema, e.pa, e.tick)
        self.mem.write(e.pa, bytes(schema.size))
        self.structs[s.uid] = s
        self.live.add(s.uid)
        for p in s.pages:
            self.page_index.setdefault(p, set()).add(s.uid)
        self.by_base.setdefault(e.pa, []).append(s.uid)
        self._next_uid = max(self._next_uid, s.uid + 1)
        return s

    def free_struct(self, uid: int) -> ev.Event:
        s = self._live(uid)
        e = self.log.append(ev.Event(ev.FREE, uid=uid, pa=s.base_pa))
        self._restore_free(e)
        poison = ev.Event(ev.WRITE, pa=s.base_pa, data=FREE_POISON, uid=uid, source=ev.ALLOCATOR)
        poison.old = self.mem.read(s.base_pa, 8)
        self.log.append(poison)
        self._restore_write(poison)
        if s.schema.size > PAGE_SIZE:
            self.frames.free(s.base_pa // PAGE_SIZE, len(s.pages))
        elif s.base_pa % PAGE_SIZE + s.schema.size <= PAGE_SIZE and \
                (s.base_pa % PAGE_SIZE) % _slab_stride(s.schema) == 0:
            self._slots.setdefault(s.schema.name, []).append(s.base_pa)
        return e

    def _restore_free(self, e: ev.Event) -> None:
        s = self.structs[e.uid]
        s.free_tick = e.tick
        self.live.discard(e.uid)
        for p in s.pages:
            self.page_index[p].discard(e.uid)

    # -- writes ----------------------------------------------------------

    def write_field(self, uid: int, field_name: str, value: Union[int, bytes]) -> ev.Event:
        s = self._live(uid)
        spec = s.schema.field(field_name)
        if spec.is_pointer:
            raise GraphError(f"{field_name} is a pointer field; use set_pointer")
        payload = encode_value(spec, value)
        e = ev.Event(ev.WRITE, pa=s.base_pa + spec.offset, data=payload, uid=uid,
                     field=field_name, source=ev.MUTATOR)
        e.old = self.mem.read(e.pa, spec.width)
        self.log.append(e)
        self._restore_write(e)
        return e

    def set_pointer(self, src_uid: int, field_name: str, dst_uid: Optional[int]) -> ev.Event:
        s = self._live(src_uid)
        spec = s.schema.field(field_name)
        if not spec.is_pointer:
            raise GraphError(f"{s.schema.name}.{field_name} is not a pointer field")
        value = 0
        if dst_uid is not None:
            d = self._live(dst_uid)
            if spec.target is not None and d.schema.name != spec.target:
                raise GraphError(f"{field_name} points to {spec.target}, not {d.schema.name}")
            value = self.kernel_base + d.base_pa
        e = ev.Event(ev.WRITE, pa=s.base_pa + spec.offset, data=value.to_bytes(8, "little"),
                     uid=src_uid, field=field_name, dst=dst_uid, source=ev.MUTATOR)
        e.old = self.mem.read(e.pa, 8)
        self.log.append(e)
        self._restore_write(e)
        return e

    def _restore_write(self, e: ev.Event) -> None:
        self.mem.write(e.pa, e.data)
        s = self.structs[e.uid]
        if e.data != e.old:
            s.changes.append((e.tick, e.pa - s.base_pa, len(e.data)))
        if e.field is None:
            return
        s.version += 1
        if s.schema.field(e.field).is_pointer:
            s.pointer_targets[e.field] = e.dst
            s.pointer_history.setdefault(e.field, []).append((e.tick, e.dst))

    def read_field(self, uid: int, field_name: str) -> int:
        s = self.get(uid)
        spec = s.schema.field(field_name)
        return int.from_bytes(self.mem.read(s.base_pa + spec.offset, spec.width), "little")

    def apply_logged(self, e: ev.Event) -> bool:
        """Re-apply a structure record from a saved log; False if not ours."""
        if e.kind == ev.ALLOC:
            s = self._restore_alloc(e)
            for p in s.pages:
                if not self.frames.is_free(p):
                    continue
                self.frames.reserve(p)
        elif e.kind == ev.FREE:
            self._restore_free(e)
        elif e.kind == ev.WRITE and e.uid is not None:
            self._restore_write(e)
        else:
            return False
        return True

    # -- queries ---------------------------------------------------------

    def struct_at(self, base_pa: int, tick: int) -> Optional[TrackedStruct]:
        """Structure whose base is ``base_pa`` and that is live at ``tick``."""
        for uid in reversed(self.by_base.get(base_pa, ())):
            s = self.structs[uid]
            if s.live_at(tick):
                return s
        return None

    def history_at(self, base_pa: int) -> list:
        return [self.structs[u] for u in self.by_base.get(base_pa, ())]

    # -- freezing --------------------------------------------------------

    def freeze_page(self, page: int, dump_tick: int) -> list:
        if page in self.dumped:
            raise GraphError(f"page {page} already frozen at tick {self.dumped[page]}")
        self.dumped[page] = dump_tick
        out = []
        for uid in sorted(self.page_index.get(page, ())):
            s = self.structs[uid]
            targets = {}
            for name, dst in s.pointer_targets.items():
                if dst is None:
                    continue
                d = self.structs[dst]
                targets[name] = TargetSnapshot(dst, d.schema.name, d.base_pa,
                                               self.mem.read(d.base_pa, d.schema.size))
            captured = tuple(p for p in s.pages if p in self.dumped)
            fz = FrozenStruct(uid, s.schema.name, s.base_pa, page, dump_tick,
                              self.mem.read(s.base_pa, s.schema.size), captured,
                              len(captured) < len(s.pages), targets)
            self.frozen[(uid, page)] = fz
            out.append(fz)
        return out
