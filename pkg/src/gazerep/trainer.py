"""Joint multi-task training on pseudo-labels with optional label-bank correction."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import ROTATION_DIMS, angular_error_deg
from .model import GazeModel, ModelConfig, save_checkpoint
from .nll import (
    DEFAULT_K,
    LabelBank,
    gaze_bounds,
    head_bounds_from_data,
    init_label_bank,
    nll_loss,
    squash,
)

log = logging.getLogger(__name__)

TASKS = ("pseudo-gaze", "head-pose", "eye-side")
SIDE_CLASS = {"L": 0, "R": 1}
NORM_EPS = 1e-6


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, ids: Sequence[str], epoch: int):
        self.term, self.ids, self.epoch = term, list(ids), epoch
        super().__init__(f"non-finite {term} loss at epoch {epoch}; samples: {', '.join(self.ids)}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    w_g: float = 1.0
    w_h: float = 1.0
    w_lr: float = 1.0
    w_nll: float = 1.0
    enabled_tasks: tuple = TASKS
    nll_enabled: bool = True
    K: float = DEFAULT_K
    bank_lr: float = 2.0  # per-sample step on bank logits (scaled by batch_size internally)
    grad_clip: float = 5.0  # max global gradient norm on network parameters; 0 disables
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "enabled_tasks", tuple(self.enabled_tasks))
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need lr > 0, batch_size >= 1, epochs >= 0")
        unknown = set(self.enabled_tasks) - set(TASKS)
        if unknown or not self.enabled_tasks:
            raise ValueError(f"enabled_tasks must be a non-empty subset of {TASKS}, got {self.enabled_tasks}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """500-epoch schedule for full-size pretraining (ResNet-50 scale)."""
        return cls(**{"epochs": 500, **overrides})


# --------------------------------------------------------------------------
# data


@dataclass
class TrainingSet:
    ids: List[str]
    images: torch.Tensor  # (N, 1, H, W) float32
    gaze: torch.Tensor  # (N, 3) pseudo-gaze
    head: torch.Tensor  # (N, 6) pseudo head pose
    side: torch.Tensor  # (N,) long, L=0 R=1
    clean_gaze: Optional[np.ndarray] = None  # for denoising diagnostics only

    def __len__(self):
        return len(self.ids)


def stack_images(samples) -> torch.Tensor:
    imgs = np.stack([np.asarray(s.image, dtype=np.float32) for s in samples])
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    else:
        imgs = np.moveaxis(imgs, -1, 1)
    return torch.from_numpy(np.ascontiguousarray(imgs))


def make_training_set(samples, labels=None) -> TrainingSet:
    """Collect images and pseudo-labels. ``labels`` defaults to each sample's stored pseudo-labels."""
    if labels is None:
        labels = [s.pseudo for s in samples]
        missing = [s.id for s, l in zip(samples, labels) if l is None]
        if missing:
            raise ValueError(f"{len(missing)} samples lack pseudo-labels (first: {missing[0]})")
    clean = None
    if all(s.render_gaze is not None for s in samples):
        clean = np.stack([s.render_gaze for s in samples])
    return TrainingSet(
        ids=[s.id for s in samples],
        images=stack_images(samples),
        gaze=torch.tensor(np.stack([l.pseudo_gaze for l in labels]), dtype=torch.float32),
        head=torch.tensor(np.stack([l.head_pose for l in labels]), dtype=torch.float32),
        side=torch.tensor([SIDE_CLASS[l.side] for l in labels], dtype=torch.long),
        clean_gaze=clean,
    )


# --------------------------------------------------------------------------
# loss terms (per sample; callers reduce)


def pseudo_gaze_loss(g, g_pred, eps: float = NORM_EPS):
    """``1 - cos(g, g_pred)`` per sample, in [0, 2]."""
    n_pred = g_pred.norm(dim=-1, keepdim=True)
    if (n_pred < eps).any():
        log.warning("near-zero gaze prediction norm; guarding with eps=%g", eps)
    g_unit = g / g.norm(dim=-1, keepdim=True).clamp_min(eps)
    p_unit = g_pred / n_pred.clamp_min(eps)
    return 1.0 - (g_unit * p_unit).sum(dim=-1)


def circular_diff(a, b):
    d = a - b
    return torch.atan2(torch.sin(d), torch.cos(d))


def head_pose_loss(h, h_pred):
    """Mean squared error over the 6 components; rotations differenced along the shortest arc."""
    if not (torch.isfinite(h).all() and torch.isfinite(h_pred).all()):
        raise ValueError("head_pose_loss: non-finite input")
    rot = list(ROTATION_DIMS)
    diff = h_pred - h
    diff = torch.cat([circular_diff(h_pred[..., rot], h[..., rot]), diff[..., 3:]], dim=-1)
    return (diff**2).mean(dim=-1)


def eye_orientation_loss(side, logits):
    return F.cross_entropy(logits, side, reduction="none")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: Dict[str, torch.Tensor]  # batch means, unweighted
    per_sample: Dict[str, torch.Tensor] = field(default_factory=dict)


def total_loss(batch: dict, outputs, banks: Optional[Dict[str, LabelBank]], cfg: TrainConfig) -> LossBreakdown:
    """Weighted sum of the enabled auxiliary terms plus the gaze- and pose-bank NLL terms.

    ``batch`` holds ``ids``, ``gaze``, ``head`` and ``side``; ``outputs`` is
    the model's ``(z, g', h', lr')`` tuple.
    """
    _, g_pred, h_pred, side_logits = outputs
    terms, per_sample = {}, {}
    total = g_pred.new_zeros(())
    if "pseudo-gaze" in cfg.enabled_tasks:
        per_sample["pseudo_gaze"] = pseudo_gaze_loss(batch["gaze"], g_pred)
        terms["pseudo_gaze"] = per_sample["pseudo_gaze"].mean()
        total = total + cfg.w_g * terms["pseudo_gaze"]
    if "head-pose" in cfg.enabled_tasks:
        per_sample["head_pose"] = head_pose_loss(batch["head"], h_pred)
        terms["head_pose"] = per_sample["head_pose"].mean()
        total = total + cfg.w_h * terms["head_pose"]
    if "eye-side" in cfg.enabled_tasks:
        per_sample["eye_side"] = eye_orientation_loss(batch["side"], side_logits)
        terms["eye_side"] = per_sample["eye_side"].mean()
        total = total + cfg.w_lr * terms["eye_side"]
    if cfg.nll_enabled:
        wanted = [name for name, task in (("gaze", "pseudo-gaze"), ("head", "head-pose")) if task in cfg.enabled_tasks]
        if not banks or any(name not in banks for name in wanted):
            raise RuntimeError("NLL enabled but label banks are not initialized")
        for name in wanted:
            bank = banks[name]
            pred = g_pred if name == "gaze" else h_pred
            target = batch["gaze"] if name == "gaze" else batch["head"]
            rows = bank.rows(batch["ids"])
            yhat = squash(target, bank.bounds).clamp(0.0, 1.0)
            l_reg, l_c = nll_loss(pred, bank.y_d(rows).to(pred.dtype), yhat, bank.bounds)
            terms[f"nll_{name}_reg"] = l_reg
            terms[f"nll_{name}_c"] = l_c
            total = total + cfg.w_nll * (l_reg + l_c)
    return LossBreakdown(total, terms, per_sample)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: GazeModel
    banks: Dict[str, LabelBank]
    log: List[dict]
    best_epoch: int


def init_banks(data: TrainingSet, cfg: TrainConfig) -> Dict[str, LabelBank]:
    banks = {}
    if not cfg.nll_enabled:
        return banks
    if "pseudo-gaze" in cfg.enabled_tasks:
        b = gaze_bounds()
        banks["gaze"] = init_label_bank(squash(data.gaze.double().numpy(), b), cfg.K, data.ids, b)
    if "head-pose" in cfg.enabled_tasks:
        b = head_bounds_from_data(data.head.double().numpy())
        banks["head"] = init_label_bank(squash(data.head.double().numpy(), b), cfg.K, data.ids, b)
    return banks


def _diagnose(batch, breakdown: LossBreakdown, epoch: int):
    bad_input = ~torch.isfinite(batch["images"].flatten(1)).all(dim=1)
    for key in ("gaze", "head"):
        bad_input |= ~torch.isfinite(batch[key]).all(dim=1)
    ids = [i for i, bad in zip(batch["ids"], bad_input.tolist()) if bad]
    for name, value in breakdown.terms.items():
        if not torch.isfinite(value):
            if not ids and name in breakdown.per_sample:
                ps = breakdown.per_sample[name]
                ids = [i for i, ok in zip(batch["ids"], torch.isfinite(ps).tolist()) if not ok]
            raise NonFiniteLossError(name, ids or list(batch["ids"]), epoch)
    raise NonFiniteLossError("total", ids or list(batch["ids"]), epoch)


def train_multitask(data: TrainingSet, cfg: TrainConfig = TrainConfig(),
                    model_cfg: ModelConfig = ModelConfig(), out_dir=None,
                    provenance: str = "") -> TrainResult:
    """Train backbone + auxiliary heads (+ label banks) on pseudo-labels.

    Writes ``metrics.jsonl``, ``final.npz`` and ``best.npz`` (lowest epoch
    total loss) to ``out_dir`` when given. With ``threads=1`` the metric
    trajectory is bit-reproducible for a fixed seed.
    """
    torch.set_num_threads(max(1, cfg.threads))
    torch.manual_seed(cfg.seed)
    model = GazeModel(dataclasses.replace(model_cfg, seed=cfg.seed))
    banks = init_banks(data, cfg)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    bank_opt = None
    if banks:
        bank_opt = torch.optim.SGD([b.U for b in banks.values()], lr=cfg.bank_lr * cfg.batch_size)
    gen = torch.Generator().manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    history, best, best_epoch = [], float("inf"), 0
    n = len(data)
    if out is not None:
        save_checkpoint(out / "best.npz", model, banks, cfg.seed, 0, provenance)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        perm = torch.randperm(n, generator=gen)
        sums: Dict[str, float] = {}
        err_sum, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = {
                "ids": [data.ids[i] for i in idx.tolist()],
                "images": data.images[idx],
                "gaze": data.gaze[idx],
                "head": data.head[idx],
                "side": data.side[idx],
            }
            bad = ~torch.isfinite(batch["images"].flatten(1)).all(dim=1)
            if bad.any():
                # batch norm would smear one bad image across the whole batch
                raise NonFiniteLossError("input", [i for i, b in zip(batch["ids"], bad.tolist()) if b], epoch)
            outputs = model(batch["images"])
            bd = total_loss(batch, outputs, banks, cfg)
            if not torch.isfinite(bd.total):
                _diagnose(batch, bd, epoch)
            opt.zero_grad(set_to_none=True)
            if bank_opt is not None:
                bank_opt.zero_grad(set_to_none=True)
            bd.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if bank_opt is not None:
                bank_opt.step()
            b = len(idx)
            seen += b
            for k, v in bd.terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * b
            sums["total"] = sums.get("total", 0.0) + float(bd.total.detach()) * b
            err_sum += float(angular_error_deg(outputs[1].detach().double().numpy(),
                                               batch["gaze"].double().numpy()).sum())
        record = {"epoch": epoch, **{k: v / seen for k, v in sums.items()},
                  "pseudo_gaze_error_deg": err_sum / seen,
                  "wall_time": time.perf_counter() - t0}
        history.append(record)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in record.items() if k != "epoch"})
        if out is not None:
            with open(out / "metrics.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
        if record["total"] < best:
            best, best_epoch = record["total"], epoch
            if out is not None:
                save_checkpoint(out / "best.npz", model, banks, cfg.seed, epoch, provenance)
    model.eval()
    if out is not None:
        save_checkpoint(out / "final.npz", model, banks, cfg.seed, cfg.epochs, provenance)
    return TrainResult(model, banks, history, best_epoch)


def bank_denoising(result: TrainResult, data: TrainingSet) -> dict:
    """MSE of noisy labels and of corrected bank labels against the clean gaze."""
    if "gaze" not in result.banks or data.clean_gaze is None:
        raise ValueError("needs a gaze bank and clean gaze labels")
    bank = result.banks["gaze"]
    order = bank.rows(data.ids).numpy()
    corrected = bank.corrected_labels()[order]
    noisy = data.gaze.double().numpy()
    clean = data.clean_gaze
    return {
        "mse_noisy": float(np.mean((noisy - clean) ** 2)),
        "mse_corrected": float(np.mean((corrected - clean) ** 2)),
        "err_noisy_deg": float(np.mean(angular_error_deg(noisy, clean))),
        "err_corrected_deg": float(np.mean(angular_error_deg(corrected, clean))),
    }
