"""Command-line front end: ``smearlab simulate|scan|analyze|plugin-impact|profiles``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import report as rp
from .acquisition import MODES, SidecarError, load_sidecar, replay, scan_log_from_sidecar
from .objects import load_schemas, parse_schemas
from .oracle import analyze_dump, smearing_report
from .scanner import pointer_inconsistency_scan
from .report import ManifestError, load_manifest
from .runner import (ConfigError, RunConfig, parse_size, rescan, run_once, scan_stats_dict,
                     write_run, write_tables)
from .workload import os_profile, profile_names


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.profile:
        cfg.profile = args.profile
    if args.profile_file:
        cfg.profile = "custom"
        try:
            cfg.custom_profile = json.loads(Path(args.profile_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read profile file: {exc}") from None
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.mem_size:
        cfg.mem_size = parse_size(args.mem_size)
    if args.pages_per_tick is not None:
        cfg.pages_per_tick = args.pages_per_tick
    if args.mode:
        cfg.mode = args.mode
    if args.frozen:
        cfg.frozen = True
    if args.placement:
        cfg.placement = args.placement
    if args.schema:
        cfg.schema = args.schema
    if args.out:
        cfg.out = args.out
    return cfg.validate()


def cmd_simulate(args) -> int:
    cfg = _config_from_args(args)
    schemas = load_schemas(cfg.schema)
    manifest = load_manifest(schemas, args.manifest) if (args.manifest or cfg.schema is None) else None
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rp.write_json(out / "config.json", {**cfg.to_dict(), "out": None})
    docs = []
    for i, seed in enumerate(cfg.seeds):
        run = run_once(cfg, seed, schemas)
        if out is not None:
            docs.append(write_run(run, out / f"D{i}", cfg))
        else:
            docs.append({"analysis": run.report.to_dict(), "smearing": run.smearing.to_dict(),
                         "scan": scan_stats_dict(run.scan)})
    text = write_tables(docs, schemas, out, manifest)
    if out is not None:
        rp.write_json(out / "summary.json", {
            "config": {**cfg.to_dict(), "out": None},
            "dumps": [{"totals": d["analysis"]["totals"], "smearing": d["smearing"]["totals"],
                       "scan": {k: v for k, v in d["scan"].items() if k != "flagged_pages"}}
                      for d in docs]})
    sys.stdout.write(text)
    return 0


def cmd_scan(args) -> int:
    image = Path(args.raw).read_bytes()
    doc = load_sidecar(args.sidecar) if args.sidecar else None
    result, cands = rescan(image, doc, kernel_base=args.kernel_base, root_frame=args.root_frame,
                           unaligned=args.unaligned)
    pages = len(image) // 4096
    if result is None:
        rows = [["-", len(cands), "n/a", "n/a",
                 rp.human_bytes(sum(c.distance for c in cands) / len(cands)) if cands else "0 B"]]
        flagged = []
        stats = {"candidates": len(cands)}
    else:
        rows = rp.table2_rows([scan_stats_dict(result)])
        flagged = result.flagged_pages
        stats = scan_stats_dict(result)
    sys.stdout.write(rp.format_table(rp.TABLE2_HEADERS, rows, "Kernel pointer inconsistencies") + "\n")
    out = Path(args.out) if args.out else Path(args.raw).with_suffix("")
    if args.out:
        out.mkdir(parents=True, exist_ok=True)
        prefix = out / "hilbert"
        rp.write_json(out / "scan.json", stats)
    else:
        prefix = Path(f"{out}.hilbert")
    rp.write_plots(prefix, pages, flagged)
    return 0


def cmd_analyze(args) -> int:
    doc = load_sidecar(args.sidecar)
    images = {}
    rep = replay(doc, lambda e, mem: images.__setitem__(e.page, mem.page(e.page)))
    image = b"".join(images.get(k, bytes(4096)) for k in range(doc["page_count"]))
    analysis = analyze_dump(rep.graph, rep.timeline).to_dict()
    smear = smearing_report(image, rep.timeline, rep.aspace).to_dict()
    if args.raw:
        result, _ = rescan(Path(args.raw).read_bytes(), doc)
    else:
        result = pointer_inconsistency_scan(rep.timeline, scan_log_from_sidecar(doc))
    scan = scan_stats_dict(result)
    schemas = parse_schemas(doc["schemas"])
    manifest = load_manifest(schemas, args.manifest) if args.manifest else None
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rp.write_json(out / "report.json", {"config": doc.get("config", {}), "analysis": analysis,
                                            "smearing": smear, "scan": scan})
    sys.stdout.write(write_tables([{"analysis": analysis, "smearing": smear, "scan": scan}],
                                  schemas, out, manifest))
    return 0


def cmd_plugin_impact(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from None
    analysis = doc.get("analysis", doc)
    if "records" not in analysis:
        raise ConfigError(f"{args.report} holds no inconsistency records")
    schemas = load_schemas(args.schema)
    manifest = load_manifest(schemas, args.manifest)
    rows = rp.plugin_impact(analysis["records"], manifest)
    sys.stdout.write(rp.format_table(rp.PLUGIN_HEADERS, rows,
                                     "Fields involved in inconsistencies per plugin") + "\n")
    if args.out:
        rp.write_csv(args.out, rp.PLUGIN_HEADERS, rows)
    return 0


def cmd_profiles(args) -> int:
    rows = []
    for name in profile_names():
        p = os_profile(name)
        mix = " ".join(f"{k}B:{v:.4f}" for k, v in sorted(p.write_size_mix.items()))
        rows.append([name, f"{p.writes_per_tick:g}", p.placement.value, mix, f"{p.alloc_churn:g}", f"{p.pt_churn:g}"])
    text = rp.format_table(["profile", "writes/tick", "placement", "size mix", "alloc churn", "pt churn"],
                           rows, "Workload profiles")
    mrows = [[m.name, m.self_writes_per_page, m.self_pages_touched, m.write_amplification, m.filler_prob]
             for m in MODES.values()]
    text += "\n\n" + rp.format_table(["mode", "writes/page", "pages touched", "amplification",
                                      "filler prob"], mrows, "Acquisition modes")
    sys.stdout.write(text + "\n")
    if args.json:
        sys.stdout.write(json.dumps({n: os_profile(n).to_dict() for n in profile_names()},
                                    sort_keys=True, indent=1) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smearlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run linear dumps and write reports")
    sim.add_argument("--config", help="JSON run configuration")
    sim.add_argument("--profile", choices=[*profile_names(), "custom"])
    sim.add_argument("--profile-file", help="JSON overrides for a custom profile")
    seeds = sim.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="single seed")
    seeds.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    sim.add_argument("--mem-size", help="physical memory, e.g. 64M")
    sim.add_argument("--pages-per-tick", type=float)
    sim.add_argument("--mode", choices=sorted(MODES))
    sim.add_argument("--frozen", action="store_true", help="no mutator activity and no noise")
    sim.add_argument("--placement", choices=["contiguous", "chunked", "scattered"])
    sim.add_argument("--schema", help="schema JSON file")
    sim.add_argument("--manifest", help="plugin manifest JSON file")
    sim.add_argument("--out", help="output directory")
    sim.set_defaults(func=cmd_simulate)

    scan = sub.add_parser("scan", help="scan a raw image for kernel pointers")
    scan.add_argument("raw")
    scan.add_argument("sidecar", nargs="?")
    scan.add_argument("--kernel-base", type=lambda s: int(s, 0), default=None)
    scan.add_argument("--root-frame", type=int, default=0,
                      help="kernel root table frame when no sidecar is given")
    scan.add_argument("--unaligned", action="store_true")
    scan.add_argument("--out")
    scan.set_defaults(func=cmd_scan)

    ana = sub.add_parser("analyze", help="rebuild ground truth from a sidecar and classify")
    ana.add_argument("sidecar")
    ana.add_argument("--raw", help="image for the captured-table pointer scan")
    ana.add_argument("--manifest")
    ana.add_argument("--out")
    ana.set_defaults(func=cmd_analyze)

    imp = sub.add_parser("plugin-impact", help="join a report with the plugin manifest")
    imp.add_argument("report")
    imp.add_argument("--manifest")
    imp.add_argument("--schema")
    imp.add_argument("--out", help="CSV output path")
    imp.set_defaults(func=cmd_plugin_impact)

    prof = sub.add_parser("profiles", help="list workload profiles and acquisition modes")
    prof.add_argument("--json", action="store_true")
    prof.set_defaults(func=cmd_profiles)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SidecarError, ManifestError, ValueError, OSError) as exc:
        print(f"smearlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
