"""Task ablation: pretrain each task subset (with and without NLL) per seed and linear-probe gaze.

Writes one CSV row per (cell, seed) and prints whether
all+nll < all < min(single task) holds for a majority of seeds.
"""

import argparse
import csv
import json
from pathlib import Path

from gazerep.experiments import ABLATION_CELLS, SINGLE_CELLS, BenchmarkConfig, pretraining_set, probe_sets, run_cell


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[3, 4, 5])
    p.add_argument("--cells", nargs="+", default=list(ABLATION_CELLS), choices=list(ABLATION_CELLS))
    p.add_argument("--epochs", type=int, default=BenchmarkConfig.epochs)
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()

    cfg = BenchmarkConfig(epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probes = probe_sets(cfg)
    rows = []
    for seed in args.seeds:
        data = pretraining_set(cfg, seed)
        for cell in args.cells:
            row = run_cell(cell, seed, cfg, data, probes)
            rows.append(row)
            print(json.dumps(row), flush=True)
    fields = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("cell", "seed", "probe_error"), k))
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)

    if set(args.cells) == set(ABLATION_CELLS):
        wins = 0
        for seed in args.seeds:
            err = {r["cell"]: r["probe_error"] for r in rows if r["seed"] == seed}
            wins += err["all+nll"] < err["all"] < min(err[c] for c in SINGLE_CELLS)
        print(f"ordering holds in {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
