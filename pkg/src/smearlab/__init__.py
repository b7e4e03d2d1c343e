"""Simulated linear acquisition of mutating kernel memory, with ground-truth
classification of the inconsistencies it leaves in the image."""

from .acquisition import DumpResult, DumpTimeline, NoiseProfile, noise_profile, run_linear_dump
from .memory import PAGE_SIZE, AddressSpace, PhysicalMemory, Placement, affected_va_size
from .objects import ObjectGraph, load_schemas
from .oracle import InconsistencyRecord, InconsistencyReport, analyze_dump, smearing_report
from .runner import RunConfig, run_once
from .scanner import PointerScanStats, hilbert_index, hilbert_map
from .workload import WorkloadProfile, generate_events, os_profile
from .world import World, WorldConfig

__version__ = "0.1.0"
