"""Run every workload profile over several seeds and write the aggregate tables.

Output goes to OUT/<profile>/ (per-dump artifacts plus CSV tables) and the
tables are echoed to stdout, including the large-page remap smearing case.
"""
import argparse
from pathlib import Path

from smearlab.objects import load_schemas
from smearlab.report import format_table, human_bytes, level_span_rows, load_manifest
from smearlab.runner import RunConfig, parse_size, run_once, write_run, write_tables
from smearlab.scenarios import scenario_large_page_remap
from smearlab.workload import profile_names


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--mem-size", default="16M")
    ap.add_argument("--mode", default="kernel-direct")
    ap.add_argument("--out", default="runs/profiles")
    args = ap.parse_args()

    schemas = load_schemas()
    manifest = load_manifest(schemas)
    for name in profile_names():
        cfg = RunConfig(profile=name, seeds=list(range(args.seeds)), mode=args.mode,
                        mem_size=parse_size(args.mem_size)).validate()
        out = Path(args.out) / name
        docs = [write_run(run_once(cfg, s, schemas), out / f"D{i}", cfg)
                for i, s in enumerate(cfg.seeds)]
        print(f"==== {name} ====")
        print(write_tables(docs, schemas, out, manifest))

    print(format_table(["level", "bytes", "span"], level_span_rows(), "Virtual span per entry"))
    rep = scenario_large_page_remap()
    rows = [[r.kind, r.level, human_bytes(dict(r.detail)["affected_va"])] for r in rep.records]
    print()
    print(format_table(["kind", "level", "affected VA"], rows, "Large-page remap between PDPT and PD dumps"))


if __name__ == "__main__":
    main()
