"""End-to-end runs: configuration, one simulation per seed, artifacts on disk."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Union

from .acquisition import (NO_NOISE, MODES, DumpResult, SidecarError, noise_profile, replay,
                          run_linear_dump, sidecar_dict, stream_duration, timeline_from_sidecar,
                          write_raw, write_sidecar)
from .memory import PAGE_SIZE, Placement, digest_bytes
from .objects import load_schemas
from .oracle import InconsistencyReport, SmearingReport, analyze_dump, smearing_report
from .scanner import (ScanRecord, ScanResult, image_translator, pointer_inconsistency_scan,
                      scan_page)
from .workload import WorkloadProfile, generate_events, os_profile, profile_names
from .world import MiB, World, WorldConfig
from . import report as rp


class ConfigError(ValueError):
    pass


def parse_size(text: Union[str, int]) -> int:
    """'64M', '16MiB', '4096', '2G' -> bytes."""
    if isinstance(text, int):
        return text
    t = text.strip().upper().removesuffix("IB").removesuffix("B")
    mult = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get(t[-1:], 1)
    digits = t[:-1] if t[-1:] in "KMG" else t
    try:
        return int(digits) * mult
    except ValueError:
        raise ConfigError(f"cannot parse size {text!r}") from None


@dataclass
class RunConfig:
    profile: str = "linux"
    custom_profile: Optional[dict] = None
    seeds: list = field(default_factory=lambda: [0])
    mem_size: int = 64 * MiB
    pages_per_tick: Union[float, list] = 16.0
    mode: str = "kernel-direct"
    frozen: bool = False
    placement: Optional[str] = None
    population: Optional[int] = None
    schema: Optional[str] = None
    out: Optional[str] = None

    def validate(self) -> "RunConfig":
        if self.profile == "custom":
            if not self.custom_profile:
                raise ConfigError("profile 'custom' needs a custom_profile mapping")
        elif self.profile not in profile_names():
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")
        if self.mem_size % PAGE_SIZE or self.mem_size < 2 * MiB:
            raise ConfigError("mem_size must be a multiple of 4KiB and at least 2MiB")
        rate = self.pages_per_tick
        steps = rate if isinstance(rate, list) else [[0, rate]]
        if any(float(r) <= 0 for _, r in steps):
            raise ConfigError("pages_per_tick must be > 0")
        if self.placement is not None:
            try:
                Placement(self.placement)
            except ValueError:
                raise ConfigError(f"unknown placement {self.placement!r}") from None
        try:
            self.workload_profile()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad profile: {exc}") from None
        return self

    def workload_profile(self) -> WorkloadProfile:
        if self.profile == "custom":
            base = os_profile(self.custom_profile.get("base", "linux"))
            overrides = {k: v for k, v in self.custom_profile.items() if k != "base"}
            overrides.setdefault("name", "custom")
            return base.with_overrides(**overrides)
        return os_profile(self.profile)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        if "mem_size" in d:
            d["mem_size"] = parse_size(d["mem_size"])
        return cls(**d)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None


@dataclass
class RunOutput:
    seed: int
    world: World
    result: DumpResult
    report: InconsistencyReport
    smearing: SmearingReport
    scan: ScanResult


def run_once(cfg: RunConfig, seed: int, schemas: Optional[dict] = None) -> RunOutput:
    profile = cfg.workload_profile()
    schemas = schemas if schemas is not None else load_schemas(cfg.schema)
    placement = Placement(cfg.placement) if cfg.placement else profile.placement
    world = World(WorldConfig(mem_size=cfg.mem_size, placement=placement, seed=seed,
                              population=cfg.population), schemas)
    if cfg.frozen:
        stream, noise = None, NO_NOISE
    else:
        duration = stream_duration(world.mem.page_count, cfg.pages_per_tick)
        stream = generate_events(profile, duration, seed, world)
        noise = noise_profile(cfg.mode)
    result = run_linear_dump(world, stream, cfg.pages_per_tick, noise)
    report = analyze_dump(world.graph, result.timeline)
    smear = smearing_report(result.image, result.timeline, world.aspace)
    scan = pointer_inconsistency_scan(result.timeline, result.scan_log)
    return RunOutput(seed, world, result, report, smear, scan)


def scan_stats_dict(scan: ScanResult) -> dict:
    return {**asdict(scan.stats), "flagged_pages": scan.flagged_pages}


def write_run(run: RunOutput, directory: Path, cfg: RunConfig) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    config = {**cfg.to_dict(), "seed": run.seed, "seeds": [run.seed], "out": None}
    write_raw(directory / "dump.raw", run.result.image)
    write_sidecar(directory / "dump.sidecar.json", sidecar_dict(run.world, run.result, config))
    doc = {"config": config,
           "analysis": run.report.to_dict(),
           "smearing": run.smearing.to_dict(),
           "scan": scan_stats_dict(run.scan),
           "writes": {"mutator": run.result.mutator_writes, "noise": run.result.noise_writes}}
    rp.write_json(directory / "report.json", doc)
    rp.write_plots(directory / "hilbert", run.world.mem.page_count, run.scan.flagged_pages)
    return doc


def write_tables(docs: list, schemas: dict, out: Optional[Path], manifest=None) -> str:
    """Aggregate tables over per-seed report documents; returns the text rendering."""
    analyses = [d["analysis"] for d in docs]
    smears = [d["smearing"] for d in docs]
    scans = [d["scan"] for d in docs]
    tables = [
        ("table4", "Inconsistencies by type in kernel structures", rp.TABLE4_HEADERS,
         rp.table4_rows(analyses)),
        ("table6", "Per-structure inconsistencies (means over dumps)", rp.TABLE6_HEADERS,
         rp.table6_rows(analyses, schemas)),
        ("table7", "Fields with inconsistencies", rp.TABLE7_HEADERS, rp.table7_rows(analyses, schemas)),
        ("table5a", "Page-table entry inconsistencies", rp.TABLE5A_HEADERS, rp.table5a_rows(smears)),
        ("table5b", "Affected virtual address space per process", rp.TABLE5B_HEADERS,
         rp.table5b_rows(smears)),
        ("table2", "Kernel pointer inconsistencies", rp.TABLE2_HEADERS, rp.table2_rows(scans)),
    ]
    if manifest is not None:
        records = [r for a in analyses for r in a["records"]]
        tables.append(("plugins", "Fields involved in inconsistencies per plugin", rp.PLUGIN_HEADERS,
                       rp.plugin_impact(records, manifest)))
    text = []
    for name, title, headers, rows in tables:
        text.append(rp.format_table(headers, rows, title))
        if out is not None:
            rp.write_csv(out / f"{name}.csv", headers, rows)
    return "\n\n".join(text) + "\n"


# --------------------------------------------------------------------------
# standalone rescans of exported dumps


def rescan(image: bytes, doc: Optional[dict] = None, *, kernel_base: Optional[int] = None,
           root_frame: int = 0, unaligned: bool = False) -> tuple:
    """Scan ``image`` validating candidates through its captured page tables.

    With a sidecar the event log is replayed so each candidate's pointed page
    can be digested at the instant its slot's page was dumped; the result is
    (ScanResult, candidates). Without one only candidates are returned.
    """
    if len(image) % PAGE_SIZE:
        raise SidecarError("image size is not a multiple of 4096")
    pc = len(image) // PAGE_SIZE
    if doc is None:
        base = kernel_base if kernel_base is not None else 0xFFFF800000000000
        translate = image_translator(image, root_frame, pc)
        cands = [c for k in range(pc)
                 for c in scan_page(image[k * PAGE_SIZE:(k + 1) * PAGE_SIZE], base, translate, k,
                                    unaligned)]
        return None, cands
    if doc["page_count"] != pc:
        raise SidecarError(f"sidecar describes {doc['page_count']} pages, image has {pc}")
    translate = image_translator(image, doc["kernel_root_frame"], pc)
    timeline = timeline_from_sidecar(doc)
    records, cands = [], []

    def on_dump(e, mem):
        k = e.page
        page = image[k * PAGE_SIZE:(k + 1) * PAGE_SIZE]
        if digest_bytes(page) != e.digest:
            raise SidecarError(f"image page {k} does not match the sidecar digest")
        for c in scan_page(page, doc["kernel_base"], translate, k, unaligned):
            cands.append(c)
            records.append(ScanRecord(c.found_at, c.value, c.resolved_pa, e.tick,
                                      digest_bytes(mem.page(c.pointed_page))))

    replay(doc, on_dump)
    return pointer_inconsistency_scan(timeline, records), cands
