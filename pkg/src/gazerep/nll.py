"""Noisy-label learning with per-sample learnable label distributions.

Continuous labels are mapped affinely into (0, 1) with fixed bounds. Each
training sample owns a row of logits ``U``; the corrected label is
``y_d = sigmoid(U)``, initialized at ``U0 = K * (2 * yhat - 1)`` so it
saturates toward the noisy label's side of 0.5. Training minimizes

    L_reg = KL(y_p || y_d)       (Bernoulli KL, summed over dimensions)
    L_c   = MSE(y_d, yhat)

jointly over the network and ``U``. The l2 term on network weights is
the optimizer's weight decay; ``U`` is not decayed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

EPS = 1e-7
DEFAULT_K = 10.0


@dataclass(frozen=True)
class TargetBounds:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != len(hi) or any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("bounds need hi > lo in every dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    def arrays(self, like=None):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if isinstance(like, torch.Tensor):
            return (torch.as_tensor(lo, dtype=like.dtype, device=like.device),
                    torch.as_tensor(hi, dtype=like.dtype, device=like.device))
        return lo, hi


def gaze_bounds() -> TargetBounds:
    return TargetBounds((-1.0,) * 3, (1.0,) * 3)


def head_bounds(translation_lo, translation_hi) -> TargetBounds:
    """Rotations in (-pi, pi); translation bounds usually come from the corpus min/max."""
    return TargetBounds((-math.pi,) * 3 + tuple(translation_lo), (math.pi,) * 3 + tuple(translation_hi))


def head_bounds_from_data(head, margin: float = 0.05) -> TargetBounds:
    t = np.asarray(head, dtype=np.float64)[:, 3:]
    lo, hi = t.min(axis=0), t.max(axis=0)
    pad = np.maximum((hi - lo) * margin, 1e-3)
    return head_bounds(lo - pad, hi + pad)


def squash(t, bounds: TargetBounds):
    """Affine map of raw targets into [0, 1]; out-of-bounds numpy inputs are clamped with a warning."""
    lo, hi = bounds.arrays(t)
    if isinstance(t, torch.Tensor):
        return (t - lo) / (hi - lo)
    t = np.asarray(t, dtype=np.float64)
    out = (t - lo) / (hi - lo)
    if np.any(out < 0) or np.any(out > 1):
        log.warning("targets outside bounds; clamping")
        out = np.clip(out, 0.0, 1.0)
    return out


def unsquash(t01, bounds: TargetBounds):
    lo, hi = bounds.arrays(t01)
    if not isinstance(t01, torch.Tensor):
        t01 = np.asarray(t01, dtype=np.float64)
    return lo + t01 * (hi - lo)


def bernoulli_kl(p, q, eps: float = EPS):
    """Sum over the last axis of the Bernoulli KL divergence ``KL(p || q)``.

    Both arguments are clamped to ``[eps, 1 - eps]``. Accepts tensors
    (differentiable) or array-likes.
    """
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(np.asarray(p, dtype=np.float64))
    if not isinstance(q, torch.Tensor):
        q = torch.as_tensor(np.asarray(q, dtype=np.float64), dtype=p.dtype)
    if not (torch.isfinite(p).all() and torch.isfinite(q).all()):
        raise ValueError("bernoulli_kl: non-finite input")
    p = p.clamp(eps, 1 - eps)
    q = q.clamp(eps, 1 - eps)
    kl = p * torch.log(p / q) + (1 - p) * torch.log((1 - p) / (1 - q))
    return kl.sum(dim=-1)


class LabelBank(nn.Module):
    """Learnable label-distribution logits, one row per training sample."""

    def __init__(self, U0, ids: Sequence[str], yhat01, K: float, bounds: TargetBounds,
                 dtype=torch.float32):
        super().__init__()
        U0 = torch.as_tensor(np.asarray(U0), dtype=dtype)
        if U0.ndim != 2 or U0.shape[0] != len(ids) or U0.shape[1] != bounds.dim:
            raise ValueError(f"bank logits must be (n={len(ids)}, {bounds.dim}), got {tuple(U0.shape)}")
        self.U = nn.Parameter(U0.clone())
        self.register_buffer("yhat", torch.as_tensor(np.asarray(yhat01), dtype=dtype))
        self.ids = list(ids)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise ValueError("duplicate sample ids in label bank")
        self.K = float(K)
        self.bounds = bounds

    def __len__(self):
        return len(self.ids)

    def rows(self, ids: Sequence[str]) -> torch.Tensor:
        try:
            return torch.tensor([self.index[i] for i in ids], dtype=torch.long)
        except KeyError as e:
            raise KeyError(f"label bank has no row for sample {e.args[0]}") from None

    def y_d(self, rows: Optional[torch.Tensor] = None) -> torch.Tensor:
        U = self.U if rows is None else self.U[rows]
        return torch.sigmoid(U)

    def corrected_labels(self) -> np.ndarray:
        """Current ``unsquash(y_d)`` for every row, in raw label units."""
        with torch.no_grad():
            return unsquash(self.y_d().double().numpy(), self.bounds)

    def state(self) -> dict:
        return {
            "U": self.U.detach().cpu().numpy(),
            "yhat": self.yhat.cpu().numpy(),
            "ids": np.asarray(self.ids),
            "meta": {"K": self.K, "lo": list(self.bounds.lo), "hi": list(self.bounds.hi)},
        }

    @classmethod
    def from_state(cls, arrays: dict, meta: dict) -> "LabelBank":
        U = arrays["U"]
        return cls(U, [str(x) for x in arrays["ids"]], arrays["yhat"], meta["K"],
                   TargetBounds(meta["lo"], meta["hi"]), dtype=torch.from_numpy(U).dtype)

    def export_table(self) -> Dict[str, np.ndarray]:
        labels = self.corrected_labels()
        return {sid: labels[i] for i, sid in enumerate(self.ids)}


def init_label_bank(yhat01, K: float = DEFAULT_K, ids: Optional[Sequence[str]] = None,
                    bounds: Optional[TargetBounds] = None, dtype=torch.float32) -> LabelBank:
    """Build a bank with ``U0 = K * (2 * yhat01 - 1)``."""
    if K <= 0:
        raise ValueError("K must be positive")
    yhat01 = np.atleast_2d(np.asarray(yhat01, dtype=np.float64))
    if np.any(yhat01 < 0) or np.any(yhat01 > 1):
        raise ValueError("squashed labels must lie in [0, 1]")
    n, dim = yhat01.shape
    ids = [str(i) for i in range(n)] if ids is None else list(ids)
    bounds = bounds or TargetBounds((0.0,) * dim, (1.0,) * dim)
    return LabelBank(K * (2.0 * yhat01 - 1.0), ids, yhat01, K, bounds, dtype=dtype)


def nll_loss(y_p_raw: torch.Tensor, y_d: torch.Tensor, yhat01: torch.Tensor, bounds: TargetBounds):
    """Return ``(L_reg, L_c)`` averaged over the batch.

    ``y_p_raw`` is the unsquashed head output; ``y_d`` are bank rows for the
    same samples (already passed through the sigmoid).
    """
    y_p = squash(y_p_raw, bounds).clamp(EPS, 1 - EPS)
    l_reg = bernoulli_kl(y_p, y_d).mean()
    l_c = torch.mean((y_d - yhat01) ** 2)
    return l_reg, l_c


def bank_logit_gradient(U, y_p01, yhat01):
    """Closed-form gradient of ``mean_b[sum_j KL] + mean_bj[(y_d - yhat)^2]`` w.r.t. ``U``.

    Uses ``d KL(p||sigmoid(u)) / du = sigmoid(u) - p`` (valid away from the
    clamp boundaries).
    """
    U = np.asarray(U, dtype=np.float64)
    q = 1.0 / (1.0 + np.exp(-U))
    b, dim = U.shape
    return (q - np.asarray(y_p01)) / b + 2.0 * (q - np.asarray(yhat01)) * q * (1 - q) / (b * dim)
