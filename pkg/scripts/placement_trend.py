"""Pointer-scan inconsistency ratio and distance under the three placement policies.

All three runs per seed share the linux workload, so only the frame
allocator differs. Prints one row per seed and the number of seeds in which
contiguous < chunked < scattered holds for each metric.
"""
import argparse

from smearlab.report import format_table, human_bytes
from smearlab.runner import RunConfig, parse_size, run_once

PLACEMENTS = ("contiguous", "chunked", "scattered")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--mem-size", default="16M")
    ap.add_argument("--pages-per-tick", type=float, default=16.0)
    ap.add_argument("--profile", default="linux")
    args = ap.parse_args()

    rows, ordered = [], [0, 0]
    for seed in range(args.seeds):
        stats = []
        for placement in PLACEMENTS:
            cfg = RunConfig(profile=args.profile, placement=placement,
                            mem_size=parse_size(args.mem_size),
                            pages_per_tick=args.pages_per_tick).validate()
            stats.append(run_once(cfg, seed).scan.stats)
        ordered[0] += stats[0].inconsistent_ratio < stats[1].inconsistent_ratio < stats[2].inconsistent_ratio
        ordered[1] += stats[0].mean_distance < stats[1].mean_distance < stats[2].mean_distance
        rows.append([seed, *[f"{100 * s.inconsistent_ratio:.1f}%" for s in stats],
                     *[human_bytes(s.mean_distance) for s in stats]])
    headers = ["seed", *[f"ratio {p}" for p in PLACEMENTS], *[f"dist {p}" for p in PLACEMENTS]]
    print(format_table(headers, rows, "Pointer-scan inconsistencies by placement"))
    print(f"\nratio ordered in {ordered[0]}/{args.seeds} seeds, "
          f"distance ordered in {ordered[1]}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
