"""Small hand-driven machines for scripted dumps.

``Lab`` wires memory, a frame allocator, an object graph and a page dumper
together without the page-table machinery, so a script can interleave
mutations and page captures one step at a time.
"""
from __future__ import annotations

from typing import Optional, Sequence

from . import events as ev
from .acquisition import DumpResult, PageDumper
from .memory import (KERNEL, LARGE_PAGE_SIZE, PAGE_SIZE, FrameAllocator, PhysicalMemory, Placement,
                     build_address_space)
from .objects import ObjectGraph, load_schemas
from .oracle import InconsistencyReport, SmearingReport, analyze_dump, smearing_report

LAB_BASE = 0xFFFF800000000000


class Lab:
    def __init__(self, pages: int = 8, schemas: Optional[dict] = None,
                 placement: Placement = Placement.CONTIGUOUS, seed: int = 0,
                 order: Optional[Sequence] = None, straddle_prob: float = 0.0):
        self.mem = PhysicalMemory(pages * PAGE_SIZE)
        self.log = ev.EventLog()
        self.frames = FrameAllocator(pages, placement, seed)
        self.graph = ObjectGraph(self.mem, schemas if schemas is not None else load_schemas(),
                                 frames=self.frames, log=self.log, kernel_base=LAB_BASE,
                                 straddle_prob=straddle_prob, seed=seed)
        self.dumper = PageDumper(self.mem, self.log, self.graph, order=order)
        self.result: Optional[DumpResult] = None

    # mutations return uids / events so scripts read naturally
    def alloc(self, schema: str) -> int:
        return self.graph.alloc_struct(schema).uid

    def free(self, uid: int) -> None:
        self.graph.free_struct(uid)

    def write(self, uid: int, field: str, value) -> None:
        self.graph.write_field(uid, field, value)

    def point(self, src: int, field: str, dst: Optional[int]) -> None:
        self.graph.set_pointer(src, field, dst)

    def page_of(self, uid: int) -> int:
        return self.graph.structs[uid].base_pa // PAGE_SIZE

    def dump(self, n: int = 1) -> None:
        for _ in range(n):
            self.dumper.dump_next()

    def dump_through(self, page: int) -> None:
        """Dump pages until ``page`` has been captured."""
        while page not in self.graph.dumped:
            self.dumper.dump_next()

    def finish(self) -> DumpResult:
        self.result = self.dumper.finish()
        return self.result

    def report(self) -> InconsistencyReport:
        if self.result is None:
            self.finish()
        return analyze_dump(self.graph, self.result.timeline)


def fill_page_with(lab: Lab, schema: str) -> list:
    """Allocate ``schema`` objects until one lands on a new page; returns all uids."""
    uids = [lab.alloc(schema)]
    first = lab.page_of(uids[0])
    while lab.page_of(uids[-1]) == first:
        uids.append(lab.alloc(schema))
    return uids


# --------------------------------------------------------------------------
# one scenario per inconsistency type


def scenario_type1() -> Lab:
    """S dumped, then D freed, then D's page dumped."""
    lab = Lab()
    s = lab.alloc("vm_area_struct")
    d = lab.alloc("file")
    lab.point(s, "vm_file", d)
    lab.dump_through(lab.page_of(s))
    lab.free(d)
    lab.finish()
    return lab


def scenario_type2() -> Lab:
    """D's page dumped before the pointer S -> D exists."""
    lab = Lab()
    d = lab.alloc("file")
    s = lab.alloc("vm_area_struct")
    lab.dump_through(lab.page_of(d))
    lab.point(s, "vm_file", d)
    lab.finish()
    return lab


def scenario_type3() -> Lab:
    """D modified after S is dumped and before D's page is."""
    lab = Lab()
    s = lab.alloc("vm_area_struct")
    d = lab.alloc("file")
    lab.point(s, "vm_file", d)
    lab.dump_through(lab.page_of(s))
    lab.write(d, "f_flags", 0x8002)
    lab.finish()
    return lab


def scenario_type4() -> Lab:
    """D dumped first, then modified while S still points to it."""
    lab = Lab()
    d = lab.alloc("file")
    s = lab.alloc("vm_area_struct")
    lab.point(s, "vm_file", d)
    lab.dump_through(lab.page_of(d))
    lab.write(d, "f_flags", 0x8002)
    lab.finish()
    return lab


def scenario_type5() -> Lab:
    """A structure straddling two pages changes between their dumps."""
    lab = Lab(straddle_prob=1.0)
    s = lab.alloc("vm_area_struct")
    lab.dump_through(lab.page_of(s))
    lab.write(s, "vm_pgoff", 0x40)   # lies in the second half of the object
    lab.finish()
    return lab


def scenario_vm_next_type3() -> Lab:
    """A single T3 on vm_area_struct.vm_next."""
    lab = Lab()
    vmas = fill_page_with(lab, "vm_area_struct")
    s, d = vmas[0], vmas[-1]
    lab.point(s, "vm_next", d)
    lab.dump_through(lab.page_of(s))
    lab.write(d, "vm_flags", 0x73)
    lab.finish()
    return lab


SCENARIOS = {"T1": scenario_type1, "T2": scenario_type2, "T3": scenario_type3,
             "T4": scenario_type4, "T5": scenario_type5}


def scenario_large_page_remap() -> SmearingReport:
    """A 2MiB direct-map entry is retargeted after its PDPT is dumped but before its PD is."""
    aspace = build_address_space(4 * 1024 * 1024)
    root = aspace.root(KERNEL)
    pdpt = aspace.tables[root.links[256][-1][1]]
    pd = aspace.tables[pdpt.links[0][-1][1]]
    rest = [p for p in range(aspace.page_count) if p not in (pdpt.frame, pd.frame)]
    dumper = PageDumper(aspace.mem, aspace.log, aspace=aspace, order=[pdpt.frame, pd.frame, *rest])
    dumper.dump_next()
    aspace.remap(KERNEL, aspace.kernel_base, LARGE_PAGE_SIZE)
    result = dumper.finish()
    return smearing_report(result.image, result.timeline, aspace)
