"""Command-line pipeline: gen-data, pseudo-label, train, probe, finetune, knn, calibrate, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import adapt
from .config import ConfigError, RunConfig, load_config
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .pseudolabel import LabelError, inject_noise, label_corpus, make_labeler
from .synthcorpus import ManifestError, derive_zone_labels, generate_corpus, load_manifest, split_of, write_manifest
from .trainer import TASKS, make_training_set, train_multitask

OUT_ENV = "GAZEREP_OUT"
RUN_RECORD = "run.json"
ABLATION_ROWS = (
    ("pseudo-gaze",), ("head-pose",), ("eye-side",),
    ("pseudo-gaze", "head-pose"), ("pseudo-gaze", "eye-side"), ("head-pose", "eye-side"),
    TASKS, TASKS,
)
USAGE_ERRORS = (ConfigError, FileNotFoundError, ManifestError, CheckpointError, LabelError,
                adapt.LabelTypeError, KeyError, ValueError)


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# run directories


def output_root(arg: Optional[str]) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def make_run_dir(root: Path, command: str, cfg: RunConfig) -> Path:
    stamp = dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    run = root / f"{command}-{stamp}-{cfg.hash()}"
    run.mkdir(parents=True, exist_ok=False)
    cfg.write(run / "config.txt")
    return run


def write_record(run: Path, command: str, args: argparse.Namespace, metrics: dict, extra: Optional[dict] = None):
    inputs = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func",)}
    rec = {"command": command, "inputs": inputs, "metrics": metrics, **(extra or {})}
    (run / RUN_RECORD).write_text(json.dumps(rec, indent=2, sort_keys=True, default=str))


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _manifest(path) -> Path:
    path = _require(path, "manifest")
    return path / "manifest.jsonl" if path.is_dir() else path


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig, run: Path) -> dict:
    manifest = generate_corpus(cfg.corpus, run / "corpus")
    if args.zones:
        samples = derive_zone_labels(load_manifest(manifest), args.zones,
                                     cfg.corpus.pitch_range_deg, cfg.corpus.yaw_range_deg)
        write_manifest(samples, manifest)
    return {"manifest": str(manifest), "samples": cfg.corpus.n_subjects * cfg.corpus.samples_per_subject}


def cmd_pseudo_label(args, cfg: RunConfig, run: Path) -> dict:
    src = _manifest(args.manifest)
    samples = load_manifest(src)
    kept, labels = label_corpus(make_labeler(args.labeler), samples)
    labels = inject_noise(labels, cfg.noise, seed=args.seed if args.seed is not None else 0)
    out_root = run / "labeled"
    out_root.mkdir()
    relabeled = []
    for s, lab in zip(kept, labels):
        s = s.with_pseudo(lab)
        if s.image_path is not None:
            s.image_path = os.path.relpath((src.parent / s.image_path).resolve(), out_root.resolve())
        relabeled.append(s)
    path = write_manifest(relabeled, out_root / "manifest.jsonl")
    return {"manifest": str(path), "labeled": len(relabeled), "dropped": len(samples) - len(relabeled)}


def cmd_train(args, cfg: RunConfig, run: Path) -> dict:
    samples = load_manifest(_manifest(args.manifest))
    missing = [s.id for s in samples if s.pseudo_gaze is None or s.pseudo_head is None]
    if missing:
        raise LabelError(f"pseudo_gaze/pseudo_head missing for {len(missing)} samples (first: {missing[0]}); "
                         "run pseudo-label first")
    data = make_training_set(samples)
    result = train_multitask(data, cfg.train, cfg.model, out_dir=run,
                             provenance=json.dumps({"manifest": str(args.manifest),
                                                    "train": dataclasses.asdict(cfg.train)}))
    final = result.log[-1] if result.log else {}
    return {"epochs": len(result.log), "best_epoch": result.best_epoch, "final": final,
            "checkpoint": str(run / "final.npz"),
            "enabled_tasks": list(cfg.train.enabled_tasks), "nll_enabled": cfg.train.nll_enabled}


def _split(samples, args):
    if args.test_manifest:
        return samples, load_manifest(_manifest(args.test_manifest))
    train = [s for s in samples if split_of(s.id, args.split_seed, (0.8, 0.0, 0.2)) == "train"]
    test = [s for s in samples if split_of(s.id, args.split_seed, (0.8, 0.0, 0.2)) == "test"]
    if not train or not test:
        raise ValueError("manifest too small for a train/test split")
    return train, test


def _train_provenance(meta: dict) -> dict:
    try:
        return json.loads(meta.get("provenance") or "{}").get("train", {})
    except json.JSONDecodeError:
        return {}


def _adapt_command(args, cfg: RunConfig, run: Path, mode: str) -> dict:
    model, _, meta = load_checkpoint(_require(args.checkpoint, "checkpoint"), expected=cfg.model)
    task = adapt.TASK_OF_HEAD[args.head]
    samples = load_manifest(_manifest(args.manifest))
    field_name = "gt_gaze" if task == "gaze" else "gt_zone"
    if any(getattr(s, field_name) is None for s in samples):
        raise adapt.LabelTypeError(f"head {args.head} needs {field_name} labels, which the manifest lacks")
    train, test = _split(samples, args)
    tr, te = adapt.make_labeled_set(train, task), adapt.make_labeled_set(test, task)
    acfg = dataclasses.replace(cfg.adapt, mode=mode)
    if mode == "kNN":
        metrics = adapt.knn_evaluate(model, tr, te, acfg)
    else:
        fn = adapt.linear_probe if mode == "LP" else adapt.fine_tune
        res = fn(model, tr, args.head, acfg, test=te)
        metrics = res.metrics
        save_checkpoint(run / "adapted.npz", res.model, seed=acfg.seed, provenance=meta.get("provenance", ""))
        with open(run / "adapt_log.jsonl", "w") as f:
            f.writelines(json.dumps(r) + "\n" for r in res.history)
    train_cfg = _train_provenance(meta)
    return {"mode": mode, "head": args.head, **metrics,
            "enabled_tasks": train_cfg.get("enabled_tasks"), "nll_enabled": train_cfg.get("nll_enabled")}


def cmd_calibrate(args, cfg: RunConfig, run: Path) -> dict:
    model, _, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"), expected=cfg.model)
    data = adapt.make_labeled_set(load_manifest(_manifest(args.manifest)), "gaze")
    table = adapt.calibrate(model, data, cfg.calib, cfg.adapt)
    write_csv(run / "calibration_rows.csv", table.rows)
    summary = table.summary()
    write_csv(run / "calibration.csv", summary)
    return {"summary": summary}


def write_csv(path: Path, rows: List[dict], fields: Optional[List[str]] = None):
    fields = fields or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _label(tasks, nll) -> str:
    return " + ".join(tasks) + (" + NLL" if nll else "")


def cmd_report(args, cfg: RunConfig, run: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = []
    for d in args.run_dirs:
        d = _require(d, "run directory")
        rec_path = _require(d / RUN_RECORD, "run record")
        records.append((d, json.loads(rec_path.read_text())))
    records.sort(key=lambda r: str(r[0]))

    # (a) error vs calibration samples
    curves = [row for d, r in records if r["command"] == "calibrate" for row in r["metrics"]["summary"]]
    write_csv(run / "calibration_curves.csv", curves, ["kind", "k", "error_mean", "error_std", "repeats"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in sorted({c["kind"] for c in curves}):
        pts = sorted((c["k"], c["error_mean"], c["error_std"]) for c in curves if c["kind"] == kind)
        ks, m, s = map(np.asarray, zip(*pts))
        ax.errorbar(ks, m, yerr=s, marker="o", capsize=3, label=kind)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("calibration samples k")
    ax.set_ylabel("angular error (deg)")
    if curves:
        ax.legend()
    fig.tight_layout()
    fig.savefig(run / "calibration_curves.png", dpi=120)
    plt.close(fig)

    # (b) ablation grid over enabled tasks x NLL, probe gaze error
    cells = {}
    for d, r in records:
        m = r["metrics"]
        if r["command"] in ("probe", "finetune") and m.get("enabled_tasks") and "mean" in m:
            key = (tuple(t for t in TASKS if t in m["enabled_tasks"]), bool(m.get("nll_enabled")))
            cells.setdefault(key, []).append(m["mean"])
    rows = []
    for i, tasks in enumerate(ABLATION_ROWS):
        nll = i == len(ABLATION_ROWS) - 1
        vals = cells.get((tuple(tasks), nll), [])
        rows.append({"tasks": _label(tasks, nll), "nll": nll, "runs": len(vals),
                     "error_mean": float(np.mean(vals)) if vals else "",
                     "error_std": float(np.std(vals)) if vals else ""})
    write_csv(run / "ablation.csv", rows)

    # (c) per-epoch loss curves
    fig, ax = plt.subplots(figsize=(5, 3.5))
    loss_rows = []
    for d, r in records:
        if r["command"] != "train" or not (d / "metrics.jsonl").exists():
            continue
        log = [json.loads(line) for line in (d / "metrics.jsonl").read_text().splitlines() if line.strip()]
        for e in log:
            loss_rows.append({"run": d.name, **e})
        if log:
            ax.plot([e["epoch"] for e in log], [e["total"] for e in log], marker=".", label=d.name[-8:])
    write_csv(run / "loss_curves.csv", loss_rows,
              sorted({k for row in loss_rows for k in row}, key=lambda k: (k != "run", k != "epoch", k)))
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    if loss_rows:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(run / "loss_curves.png", dpi=120)
    plt.close(fig)
    return {"calibration_points": len(curves), "ablation_rows": len(rows), "loss_points": len(loss_rows)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pseudo-label": cmd_pseudo_label,
    "train": cmd_train,
    "probe": lambda a, c, r: _adapt_command(a, c, r, "LP"),
    "finetune": lambda a, c, r: _adapt_command(a, c, r, "FT"),
    "knn": lambda a, c, r: _adapt_command(a, c, r, "kNN"),
    "calibrate": cmd_calibrate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    common.add_argument("--threads", type=int, help="torch intra-op threads (1 = deterministic)")

    p = argparse.ArgumentParser(prog="gazerep", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic eye-patch corpus")
    g.add_argument("--zones", type=int, default=0, help="also derive Z gaze-zone labels (perfect square)")
    pl = sub.add_parser("pseudo-label", parents=[common], help="attach pseudo-labels (and optional noise)")
    pl.add_argument("--manifest", required=True)
    pl.add_argument("--labeler", default="geometric", choices=["oracle", "geometric", "external"])
    t = sub.add_parser("train", parents=[common], help="multi-task pretraining on pseudo-labels")
    t.add_argument("--manifest", required=True)
    for name in ("probe", "finetune", "knn"):
        a = sub.add_parser(name, parents=[common], help=f"{name} a checkpoint on labeled data")
        a.add_argument("--checkpoint", required=True)
        a.add_argument("--manifest", required=True)
        a.add_argument("--test-manifest")
        a.add_argument("--head", default="zone" if name == "knn" else "gaze3d", choices=["gaze3d", "zone"])
        a.add_argument("--split-seed", type=int, default=0)
    c = sub.add_parser("calibrate", parents=[common], help="error-vs-k calibration table")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--manifest", required=True)
    r = sub.add_parser("report", parents=[common], help="CSV tables and plots from run directories")
    r.add_argument("run_dirs", nargs="+")
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"{s}.seed={args.seed}" for s in ("corpus", "model", "train", "adapt", "calib")]
    if args.threads is not None:
        overrides += [f"train.threads={args.threads}", f"adapt.threads={args.threads}"]
    return load_config(args.config, overrides)


def error_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    return json.dumps({"error": type(exc).__name__, "message": msg})


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, args.threads or 1))
        run = make_run_dir(output_root(args.out), args.command, cfg)
        metrics = COMMANDS[args.command](args, cfg, run)
        write_record(run, args.command, args, metrics)
    except USAGE_ERRORS as e:
        print(error_line(e), file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every failure becomes one parsable line
        print(error_line(e), file=sys.stderr)
        return 1
    print(json.dumps({"run_dir": str(run), **{k: v for k, v in metrics.items() if not isinstance(v, (dict, list))}}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
