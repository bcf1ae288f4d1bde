"""Calibration curves: gaze error against the number of calibration samples.

Pretrains a backbone on a population with per-subject gaze biases, probes a
population gaze head, then adapts it to each target subject with k samples
from that subject (person-specific) or from other subjects
(person-independent). Writes a CSV and a plot.
"""

import argparse
import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from gazerep.experiments import CalibrationExperiment, calibration_curves  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=CalibrationExperiment.repeats)
    p.add_argument("--kinds", nargs="+", default=["person-specific", "person-independent"])
    p.add_argument("--out", default="runs/calibration")
    args = p.parse_args()

    cfg = CalibrationExperiment(seed=args.seed, repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = calibration_curves(cfg, kinds=tuple(args.kinds))
    summary = [row for t in tables.values() for row in t.summary()]
    with open(out / "calibration.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in tables:
        pts = [r for r in summary if r["kind"] == kind]
        ax.errorbar([r["k"] for r in pts], [r["error_mean"] for r in pts], yerr=[r["error_std"] for r in pts],
                    marker="o", capsize=3, label=kind)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("calibration samples k")
    ax.set_ylabel("angular error (deg)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "calibration.png", dpi=120)
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
