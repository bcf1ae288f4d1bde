"""Desk-scale experiment protocols shared by the scripts and the acceptance suite.

* noisy-label benchmark and task ablation: pretrain on a corrupted synthetic
  corpus with different task subsets, then linear-probe gaze on held-out
  subjects;
* calibration curves: error against the number of calibration samples for
  person-specific and person-independent adaptation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .adapt import AdaptConfig, CalibrationProtocol, CalibrationTable, LabeledSet, calibrate, linear_probe, \
    make_labeled_set
from .model import GazeModel
from .pseudolabel import GeometricLabeler, NoiseConfig, inject_noise, label_corpus
from .synthcorpus import CorpusConfig, synthesize
from .trainer import TASKS, TrainConfig, TrainingSet, bank_denoising, make_training_set, train_multitask

ABLATION_CELLS: Dict[str, dict] = {
    "gaze": dict(enabled_tasks=("pseudo-gaze",), nll_enabled=False),
    "head": dict(enabled_tasks=("head-pose",), nll_enabled=False),
    "side": dict(enabled_tasks=("eye-side",), nll_enabled=False),
    "all": dict(enabled_tasks=TASKS, nll_enabled=False),
    "all+nll": dict(enabled_tasks=TASKS, nll_enabled=True),
}
SINGLE_CELLS = ("gaze", "head", "side")


@dataclass(frozen=True)
class BenchmarkConfig:
    n_subjects: int = 10
    samples_per_subject: int = 200
    corrupt_fraction: float = 0.3
    corrupt_deg: float = 20.0
    pose_sigma_rad: float = 0.02
    epochs: int = 30
    # probe data: disjoint synthetic subjects, first half trains the probe
    probe_subjects: int = 12
    probe_samples_per_subject: int = 200
    probe_corpus_seed: int = 7
    probe_lr: float = 0.03
    probe_epochs: int = 60
    probe_seeds: Tuple[int, ...] = (0, 1)
    threads: int = 1


def pretraining_set(cfg: BenchmarkConfig, seed: int) -> TrainingSet:
    """Geometric pseudo-labels on a fresh corpus, with a fraction of gaze labels rotated by a fixed angle."""
    samples = synthesize(CorpusConfig(n_subjects=cfg.n_subjects, samples_per_subject=cfg.samples_per_subject,
                                      seed=1 + 100 * seed))
    kept, labels = label_corpus(GeometricLabeler(), samples)
    noise = NoiseConfig(corrupt_fraction=cfg.corrupt_fraction, large_corrupt_deg=cfg.corrupt_deg,
                        pose_sigma_rad=cfg.pose_sigma_rad)
    return make_training_set(kept, inject_noise(labels, noise, seed=3 + seed))


def probe_sets(cfg: BenchmarkConfig) -> Tuple[LabeledSet, LabeledSet]:
    samples = synthesize(CorpusConfig(n_subjects=cfg.probe_subjects, samples_per_subject=cfg.probe_samples_per_subject,
                                      seed=cfg.probe_corpus_seed))
    half = (cfg.probe_subjects // 2) * cfg.probe_samples_per_subject
    return make_labeled_set(samples[:half]), make_labeled_set(samples[half:])


def probe_error(model: GazeModel, train: LabeledSet, test: LabeledSet, cfg: BenchmarkConfig) -> float:
    """Linear-probe gaze error in degrees, averaged over probe seeds to damp head-initialization noise."""
    errs = []
    for s in cfg.probe_seeds:
        acfg = AdaptConfig(lr=cfg.probe_lr, epochs=cfg.probe_epochs, augment=False, seed=s, threads=cfg.threads)
        errs.append(linear_probe(model, train, "gaze3d", acfg, test=test).metrics["mean"])
    return float(np.mean(errs))


def run_cell(cell: str, seed: int, cfg: BenchmarkConfig, data: TrainingSet,
             probes: Tuple[LabeledSet, LabeledSet], out_dir=None) -> dict:
    """Pretrain one ablation cell and probe it."""
    t0 = time.perf_counter()
    tcfg = TrainConfig(epochs=cfg.epochs, seed=seed, threads=cfg.threads, **ABLATION_CELLS[cell])
    result = train_multitask(data, tcfg, out_dir=out_dir)
    row = {"cell": cell, "seed": seed, "probe_error": probe_error(result.model, *probes, cfg)}
    if "gaze" in result.banks and data.clean_gaze is not None:
        row.update(bank_denoising(result, data))
    row["seconds"] = time.perf_counter() - t0
    return row


# --------------------------------------------------------------------------
# calibration curves


@dataclass(frozen=True)
class CalibrationExperiment:
    population_subjects: int = 10
    population_samples: int = 200
    target_subjects: int = 4
    target_samples: int = 400
    subject_bias_deg: float = 3.0
    pretrain_epochs: int = 20
    base_lr: float = 0.03
    base_epochs: int = 40
    k_samples: Tuple[int, ...] = (1, 4, 16, 64, 256)
    repeats: int = 10
    adapt_lr: float = 0.01
    adapt_epochs: int = 10
    adapt_min_steps: int = 60
    seed: int = 0
    threads: int = 1

    def adapt_config(self) -> AdaptConfig:
        return AdaptConfig(lr=self.adapt_lr, epochs=self.adapt_epochs, min_steps=self.adapt_min_steps,
                           augment=False, threads=self.threads)


def calibration_base_model(cfg: CalibrationExperiment) -> GazeModel:
    """Backbone pretrained on pseudo-labels plus a gaze head probed on population subjects."""
    pop = synthesize(CorpusConfig(n_subjects=cfg.population_subjects, samples_per_subject=cfg.population_samples,
                                  subject_bias_deg=cfg.subject_bias_deg, seed=1000 + cfg.seed))
    kept, labels = label_corpus(GeometricLabeler(), pop)
    result = train_multitask(make_training_set(kept, labels),
                             TrainConfig(epochs=cfg.pretrain_epochs, seed=cfg.seed, threads=cfg.threads))
    base = linear_probe(result.model, make_labeled_set(pop), "gaze3d",
                        AdaptConfig(lr=cfg.base_lr, epochs=cfg.base_epochs, augment=False, seed=cfg.seed,
                                    threads=cfg.threads))
    return base.model


def calibration_targets(cfg: CalibrationExperiment) -> LabeledSet:
    return make_labeled_set(synthesize(CorpusConfig(
        n_subjects=cfg.target_subjects, samples_per_subject=cfg.target_samples,
        subject_bias_deg=cfg.subject_bias_deg, seed=2000 + cfg.seed)))


def calibration_curves(cfg: CalibrationExperiment, model: Optional[GazeModel] = None,
                       kinds=("person-specific", "person-independent")) -> Dict[str, CalibrationTable]:
    model = model if model is not None else calibration_base_model(cfg)
    data = calibration_targets(cfg)
    return {kind: calibrate(model, data, CalibrationProtocol(kind=kind, k_samples=cfg.k_samples,
                                                             repeats=cfg.repeats, seed=cfg.seed),
                            cfg.adapt_config())
            for kind in kinds}


def curve_points(tables: Dict[str, CalibrationTable]) -> Dict[str, Dict[int, float]]:
    return {kind: {r["k"]: r["error_mean"] for r in t.summary()} for kind, t in tables.items()}
