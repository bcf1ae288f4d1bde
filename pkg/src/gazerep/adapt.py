"""Downstream adaptation: linear probing, fine-tuning, weighted k-NN and calibration."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import angular_error_deg
from .model import GazeModel, parameter_digest
from .trainer import stack_images

log = logging.getLogger(__name__)

TASK_OF_HEAD = {"gaze3d": "gaze", "zone": "zone"}
CALIBRATION_KINDS = ("person-specific", "person-independent", "few-shot")


class LabelTypeError(ValueError):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "LP"
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    patience: int = 5
    val_fraction: float = 0.1
    min_steps: int = 0  # raise the epoch count until at least this many optimizer steps run
    augment: bool = True
    crop_scale: tuple = (0.8, 1.0)
    flip_prob: float = 0.5
    k: int = 10
    tau: float = 0.07
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.mode not in ("LP", "FT", "kNN"):
            raise ValueError(f"mode must be LP, FT or kNN, got {self.mode!r}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need lr >= 0, epochs >= 0, batch_size >= 1")
        if self.k < 1 or self.tau <= 0:
            raise ValueError("need k >= 1 and tau > 0")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        object.__setattr__(self, "crop_scale", (float(lo), float(hi)))


@dataclass(frozen=True)
class CalibrationProtocol:
    kind: str = "person-specific"
    k_samples: tuple = (1, 4, 16, 64, 128, 256)
    test_per_subject: int = 500  # few-shot: the last N samples of each subject
    repeats: int = 10
    subjects: Optional[tuple] = None  # target subjects; default all
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CALIBRATION_KINDS:
            raise ValueError(f"kind must be one of {CALIBRATION_KINDS}")
        if not self.k_samples or any(k < 1 for k in self.k_samples):
            raise ValueError("k_samples must be positive")
        object.__setattr__(self, "k_samples", tuple(int(k) for k in self.k_samples))
        if self.subjects is not None:
            object.__setattr__(self, "subjects", tuple(self.subjects))


# --------------------------------------------------------------------------
# labeled data


@dataclass
class LabeledSet:
    ids: List[str]
    subjects: List[str]
    images: torch.Tensor
    targets: np.ndarray  # (N, 3) gaze or (N,) zone index
    task: str

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(
            [self.ids[i] for i in idx], [self.subjects[i] for i in idx],
            self.images[torch.from_numpy(idx)], self.targets[idx], self.task,
        )

    def target_tensor(self) -> torch.Tensor:
        if self.task == "gaze":
            return torch.tensor(self.targets, dtype=torch.float32)
        return torch.tensor(self.targets, dtype=torch.long)


def make_labeled_set(samples, task: str = "gaze") -> LabeledSet:
    if task not in ("gaze", "zone"):
        raise ValueError(f"task must be gaze or zone, got {task!r}")
    field_name = "gt_gaze" if task == "gaze" else "gt_zone"
    missing = [s.id for s in samples if getattr(s, field_name) is None]
    if missing:
        raise LabelTypeError(f"{field_name} missing for {len(missing)} samples (first: {missing[0]})")
    if task == "gaze":
        targets = np.stack([np.asarray(s.gt_gaze, dtype=np.float64) for s in samples])
    else:
        targets = np.array([int(s.gt_zone) for s in samples], dtype=np.int64)
    return LabeledSet([s.id for s in samples], [s.subject for s in samples], stack_images(samples), targets, task)


# --------------------------------------------------------------------------
# augmentation


def zone_mirror(zone_count: int) -> np.ndarray:
    """Zone permutation under a horizontal flip (yaw columns reversed); assumes a yaw-symmetric grid."""
    n = int(round(math.sqrt(zone_count)))
    z = np.arange(zone_count)
    return (z // n) * n + (n - 1 - z % n)


def augment_batch(images, targets, task: str, cfg: AdaptConfig, gen: torch.Generator, zone_count: int = 9):
    """Random resized crop (fixed aspect) plus horizontal flip, as one affine resample.

    Flipped gaze labels have their x component negated; flipped zone labels
    swap yaw columns.
    """
    b = images.shape[0]
    lo, hi = cfg.crop_scale
    scale = torch.sqrt(lo + (hi - lo) * torch.rand(b, generator=gen, dtype=torch.float64)).float()
    room = 1.0 - scale
    tx = (torch.rand(b, generator=gen) * 2 - 1) * room
    ty = (torch.rand(b, generator=gen) * 2 - 1) * room
    flip = torch.rand(b, generator=gen) < cfg.flip_prob
    sx = torch.where(flip, -scale, scale)
    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0], theta[:, 0, 2] = sx, tx
    theta[:, 1, 1], theta[:, 1, 2] = scale, ty
    grid = F.affine_grid(theta, list(images.shape), align_corners=False)
    out = F.grid_sample(images, grid, mode="bilinear", padding_mode="border", align_corners=False)

    targets = targets.clone()
    if task == "gaze":
        flipped = targets[flip].clone()
        flipped[:, 0] = -flipped[:, 0]
        twice = flipped.clone()
        twice[:, 0] = -twice[:, 0]
        assert torch.equal(twice, targets[flip]), "flip is not an involution on these labels"
        targets[flip] = flipped
    else:
        perm = torch.from_numpy(zone_mirror(zone_count))
        assert torch.equal(perm[perm], torch.arange(zone_count)), "zone mirror is not an involution"
        targets[flip] = perm[targets[flip]]
    return out, targets


# --------------------------------------------------------------------------
# metrics


def gaze_direction_loss(y, y_pred, eps: float = 1e-6):
    """``1 - cos`` between target and predicted gaze, per sample."""
    yn = y / y.norm(dim=-1, keepdim=True).clamp_min(eps)
    pn = y_pred / y_pred.norm(dim=-1, keepdim=True).clamp_min(eps)
    return 1.0 - (yn * pn).sum(dim=-1)


def head_loss(task: str, pred, target):
    if task == "gaze":
        return gaze_direction_loss(target, pred).mean()
    return F.cross_entropy(pred, target)


def evaluate_predictions(pred, data: LabeledSet) -> dict:
    """Gaze: mean/std angular error (degrees); zone: top-1 accuracy. Includes a per-subject breakdown."""
    if len(data) == 0:
        raise ValueError("empty test set")
    pred = np.asarray(pred)
    if data.task == "gaze":
        per = angular_error_deg(pred, data.targets)
        summary = lambda v: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": int(len(v))}
    else:
        per = (pred.argmax(axis=1) if pred.ndim == 2 else pred) == data.targets
        per = per.astype(np.float64)
        summary = lambda v: {"accuracy": float(np.mean(v)), "n": int(len(v))}
    subjects = np.asarray(data.subjects)
    out = summary(per)
    out["per_subject"] = {s: summary(per[subjects == s]) for s in sorted(set(data.subjects))}
    return out


@torch.no_grad()
def extract_features(model: GazeModel, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Penultimate (pooled) features, one row per image."""
    model.eval()
    if isinstance(images, LabeledSet):
        images = images.images
    chunks = [model.embed(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    if not chunks:
        return np.zeros((0, model.cfg.embed_dim), dtype=np.float32)
    return torch.cat(chunks).numpy()


def feature_table(model: GazeModel, data: LabeledSet) -> Dict[str, np.ndarray]:
    feats = extract_features(model, data.images)
    return dict(zip(data.ids, feats))


@torch.no_grad()
def predict(model: GazeModel, images: torch.Tensor, head: str, batch_size: int = 256) -> np.ndarray:
    model.eval()
    outs = [model.forward_downstream(images[i:i + batch_size], head) for i in range(0, len(images), batch_size)]
    return torch.cat(outs).double().numpy()


def evaluate(model: GazeModel, data: LabeledSet, head: Optional[str] = None) -> dict:
    head = head or ("gaze3d" if data.task == "gaze" else "zone")
    return evaluate_predictions(predict(model, data.images, head), data)


# --------------------------------------------------------------------------
# probing / fine-tuning


@dataclass
class AdaptResult:
    model: GazeModel
    metrics: dict
    history: List[dict] = field(default_factory=list)
    backbone_digest_before: str = ""
    backbone_digest_after: str = ""


def _check_head(head: str, data: LabeledSet):
    if head not in TASK_OF_HEAD:
        raise ValueError(f"head must be gaze3d or zone, got {head!r}")
    if TASK_OF_HEAD[head] != data.task:
        raise LabelTypeError(f"head {head} needs {TASK_OF_HEAD[head]} labels, dataset has {data.task}")


def _split_val(n: int, cfg: AdaptConfig, rng: np.random.Generator):
    n_val = int(n * cfg.val_fraction)
    if cfg.patience <= 0 or n_val < 2:
        return np.arange(n), np.arange(0)
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _adapt(model: GazeModel, train: LabeledSet, head: str, cfg: AdaptConfig, train_backbone: bool,
           test: Optional[LabeledSet], warm_start: bool) -> AdaptResult:
    _check_head(head, train)
    torch.set_num_threads(max(1, cfg.threads))
    model = copy.deepcopy(model)
    model.eval()  # batch-norm statistics stay frozen in both LP and FT
    if not (warm_start and model.has_head(head)):
        model.attach_head(head, seed=cfg.seed)
        if len(train) >= 2:  # standardize probe inputs with the training features
            model.probes[head][0].fit(torch.from_numpy(extract_features(model, train.images)))
    for p in model.backbone.parameters():
        p.requires_grad_(train_backbone)
    params = list(model.probes[head].parameters()) + (list(model.backbone.parameters()) if train_backbone else [])
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    digest_before = parameter_digest(model.backbone)

    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    tr_idx, val_idx = _split_val(len(train), cfg, rng)
    fit, val = train.subset(tr_idx), (train.subset(val_idx) if len(val_idx) else None)
    targets = fit.target_tensor()
    steps_per_epoch = max(1, math.ceil(len(fit) / cfg.batch_size))
    epochs = max(cfg.epochs, math.ceil(cfg.min_steps / steps_per_epoch)) if len(fit) else 0

    def head_out(x):
        if train_backbone:
            return model.forward_downstream(x, head)
        with torch.no_grad():
            z = model.embed(x)
        return model.probes[head](z)

    best_state, best_val, bad_epochs, history = None, float("inf"), 0, []
    for epoch in range(1, epochs + 1):
        perm = torch.randperm(len(fit), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(fit), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x, y = fit.images[idx], targets[idx]
            if cfg.augment:
                x, y = augment_batch(x, y, train.task, cfg, gen, model.cfg.zone_count)
            loss = head_loss(train.task, head_out(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        rec = {"epoch": epoch, "train_loss": total / seen}
        if val is not None:
            with torch.no_grad():
                rec["val_loss"] = float(head_loss(val.task, model.forward_downstream(val.images, head),
                                                  val.target_tensor()))
            if rec["val_loss"] < best_val:
                best_val, bad_epochs = rec["val_loss"], 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                bad_epochs += 1
        history.append(rec)
        if val is not None and bad_epochs >= cfg.patience:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    digest_after = parameter_digest(model.backbone)
    metrics = evaluate(model, test if test is not None else train, head)
    return AdaptResult(model, metrics, history, digest_before, digest_after)


def linear_probe(model: GazeModel, train: LabeledSet, head: str = "gaze3d", cfg: AdaptConfig = AdaptConfig(),
                 test: Optional[LabeledSet] = None, warm_start: bool = False) -> AdaptResult:
    """Train only the probe head on frozen backbone features.

    With ``warm_start`` an already attached head of the same kind is adapted
    instead of a fresh one. Metrics are computed on ``test`` (or ``train``).
    """
    return _adapt(model, train, head, cfg, train_backbone=False, test=test, warm_start=warm_start)


def fine_tune(model: GazeModel, train: LabeledSet, head: str = "gaze3d", cfg: AdaptConfig = AdaptConfig(mode="FT"),
              test: Optional[LabeledSet] = None, warm_start: bool = False) -> AdaptResult:
    """Update backbone and probe head together from the given initialization."""
    return _adapt(model, train, head, cfg, train_backbone=True, test=test, warm_start=warm_start)


# --------------------------------------------------------------------------
# weighted k-NN


def knn_classify(train_features, train_labels, query_features, k: int = 10, tau: float = 0.07,
                 n_classes: Optional[int] = None) -> np.ndarray:
    """Weighted k-NN vote by cosine similarity.

    Each of the ``k`` most similar training rows adds ``exp(cos / tau)`` to
    its class score; the highest score wins and ties go to the lowest class
    index.
    """
    T = np.asarray(train_features, dtype=np.float64)
    Q = np.asarray(query_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if len(T) == 0:
        raise ValueError("empty training set")
    if k > len(T):
        raise ValueError(f"k={k} exceeds the training set size {len(T)}")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    Tn = T / np.linalg.norm(T, axis=1, keepdims=True)
    Qn = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    sims = Qn @ Tn.T
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    w = np.exp(np.take_along_axis(sims, top, axis=1) / tau)
    scores = np.zeros((len(Q), n_classes))
    np.add.at(scores, (np.repeat(np.arange(len(Q)), k), y[top].ravel()), w.ravel())
    return scores.argmax(axis=1)


def knn_evaluate(model: GazeModel, train: LabeledSet, test: LabeledSet, cfg: AdaptConfig = AdaptConfig(mode="kNN")) -> dict:
    if train.task != "zone":
        raise LabelTypeError("k-NN evaluation needs zone labels")
    pred = knn_classify(extract_features(model, train.images), train.targets,
                        extract_features(model, test.images), cfg.k, cfg.tau, model.cfg.zone_count)
    return evaluate_predictions(pred, test)


# --------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationTable:
    rows: List[dict]  # one per (kind, k, repeat, subject)

    def summary(self) -> List[dict]:
        """Mean +- std over repeats of the subject-averaged error, per (kind, k)."""
        groups: Dict[tuple, Dict[int, List[float]]] = {}
        for r in self.rows:
            groups.setdefault((r["kind"], r["k"]), {}).setdefault(r["repeat"], []).append(r["error_mean"])
        out = []
        for (kind, k), reps in sorted(groups.items()):
            per_repeat = [float(np.mean(v)) for _, v in sorted(reps.items())]
            out.append({"kind": kind, "k": k, "error_mean": float(np.mean(per_repeat)),
                        "error_std": float(np.std(per_repeat)), "repeats": len(per_repeat)})
        return out

    def mean_error(self, kind: str, k: int) -> float:
        for r in self.summary():
            if r["kind"] == kind and r["k"] == k:
                return r["error_mean"]
        raise KeyError((kind, k))


def _calibration_split(subject_idx: np.ndarray, protocol: CalibrationProtocol):
    """Pool the target subject's calibration candidates and fixed test rows (few-shot only)."""
    if protocol.kind == "few-shot":
        if len(subject_idx) < protocol.test_per_subject + max(protocol.k_samples):
            raise ValueError("insufficient per-subject data for few-shot calibration")
        return subject_idx[:-protocol.test_per_subject], subject_idx[-protocol.test_per_subject:]
    return subject_idx, None


def calibrate(model: GazeModel, data: LabeledSet, protocol: CalibrationProtocol,
              cfg: AdaptConfig = AdaptConfig()) -> CalibrationTable:
    """Error-vs-k table for one calibration protocol.

    For every target subject, repeat and ``k``: draw ``k`` calibration
    samples (from the subject for person-specific / few-shot, from the other
    subjects for person-independent), adapt the gaze head by linear probing
    (warm-started from an attached ``gaze3d`` head if present) and evaluate
    on the subject's held-out rows.
    """
    if data.task != "gaze":
        raise LabelTypeError("calibration needs gaze labels")
    subjects_all = np.asarray(data.subjects)
    targets = protocol.subjects or tuple(sorted(set(data.subjects)))
    kmax = max(protocol.k_samples)
    rows = []
    for si, subject in enumerate(targets):
        own = np.flatnonzero(subjects_all == subject)
        others = np.flatnonzero(subjects_all != subject)
        if protocol.kind == "person-independent":
            if len(others) < kmax or len(own) == 0:
                raise ValueError(f"insufficient data for person-independent calibration of {subject}")
        elif len(own) <= kmax:
            raise ValueError(f"insufficient per-subject data for {subject}: {len(own)} <= {kmax}")
        pool, fixed_test = _calibration_split(own, protocol)
        for repeat in range(protocol.repeats):
            for k in protocol.k_samples:
                rng = np.random.default_rng([protocol.seed, si, repeat, k])
                if protocol.kind == "person-independent":
                    cal = rng.choice(others, size=k, replace=False)
                    test = own if fixed_test is None else fixed_test
                else:
                    cal = rng.choice(pool, size=k, replace=False)
                    test = fixed_test if fixed_test is not None else np.setdiff1d(own, cal)
                cell_cfg = dataclasses.replace(cfg, seed=int(rng.integers(2**31)))
                res = linear_probe(model, data.subset(cal), "gaze3d", cell_cfg,
                                   test=data.subset(test), warm_start=True)
                rows.append({"kind": protocol.kind, "k": k, "repeat": repeat, "subject": subject,
                             "error_mean": res.metrics["mean"], "error_std": res.metrics["std"],
                             "n_test": res.metrics["n"]})
    return CalibrationTable(rows)
