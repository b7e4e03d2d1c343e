"""Total writes seen during a dump for each acquisition mode, relative to kernel-direct."""
import argparse

from smearlab.acquisition import MODES
from smearlab.report import format_table
from smearlab.runner import RunConfig, parse_size, run_once
from smearlab.workload import profile_names


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--mem-size", default="8M")
    args = ap.parse_args()

    rows = []
    for name in profile_names():
        for seed in range(args.seeds):
            totals = {}
            for mode in MODES:
                cfg = RunConfig(profile=name, mode=mode, mem_size=parse_size(args.mem_size)).validate()
                res = run_once(cfg, seed).result
                totals[mode] = (res.mutator_writes, res.noise_writes, res.total_writes)
            base = totals["kernel-direct"][2]
            rows.append([name, seed, totals["kernel-direct"][0],
                         *[f"{totals[m][2]} ({totals[m][2] / base:.3f}x)" for m in MODES]])
    print(format_table(["profile", "seed", "mutator", *MODES], rows,
                       "Writes during acquisition by mode"))


if __name__ == "__main__":
    main()
