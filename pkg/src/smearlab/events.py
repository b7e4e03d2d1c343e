"""Totally ordered event log shared by every mutator of the simulated machine.

Each record receives a tick equal to its position in the log, so ticks are
unique and strictly increasing. Page-dump events live in the same log as
mutator writes, which is what lets the oracle reason about windows such as
"between the dump of page S and the dump of page D".
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

ALLOC = "alloc"
FREE = "free"
WRITE = "write"
PT_ALLOC = "pt_alloc"
PT_FREE = "pt_free"
PT_WRITE = "pt_write"
DUMP = "dump"

KINDS = (ALLOC, FREE, WRITE, PT_ALLOC, PT_FREE, PT_WRITE, DUMP)
WRITE_KINDS = (WRITE, PT_WRITE)

# sources for WRITE records
MUTATOR = "mutator"
NOISE = "noise"
ALLOCATOR = "allocator"


@dataclass(slots=True)
class Event:
    kind: str
    tick: int = -1
    uid: Optional[int] = None
    pa: Optional[int] = None
    data: Optional[bytes] = None
    old: Optional[bytes] = None
    schema: Optional[str] = None
    field: Optional[str] = None
    dst: Optional[int] = None
    level: Optional[int] = None
    owner: Optional[int] = None
    index: Optional[int] = None
    page: Optional[int] = None
    digest: Optional[str] = None
    source: Optional[str] = None
    size: Optional[int] = None

    def to_dict(self) -> dict:
        out = {}
        for name in self.__slots__:
            value = getattr(self, name)
            if value is None:
                continue
            out[name] = value.hex() if isinstance(value, bytes) else value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        d = dict(d)
        for key in ("data", "old"):
            if key in d:
                d[key] = bytes.fromhex(d[key])
        return cls(**d)


@dataclass
class EventLog:
    events: list = field(default_factory=list)

    def append(self, event: Event) -> Event:
        event.tick = len(self.events)
        self.events.append(event)
        return event

    @property
    def now(self) -> int:
        """Tick the next appended event will receive."""
        return len(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]

    def of_kind(self, *kinds: str) -> Iterator[Event]:
        return (e for e in self.events if e.kind in kinds)

    def writes_between(self, lo: int, hi: int, source: Optional[str] = None) -> int:
        """Count WRITE/PT_WRITE records with lo <= tick < hi."""
        n = 0
        for e in self.events[lo:hi]:
            if e.kind in WRITE_KINDS and (source is None or e.source == source):
                n += 1
        return n

    def to_list(self) -> list:
        return [e.to_dict() for e in self.events]

    @classmethod
    def from_list(cls, records: list) -> "EventLog":
        log = cls()
        for r in records:
            e = Event.from_dict(r)
            if e.tick != len(log.events):
                raise ValueError(f"event log out of order at tick {e.tick}")
            log.events.append(e)
        return log
