"""Backbone, auxiliary heads, downstream probe heads and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1
HEAD_KINDS = ("gaze3d", "zone")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny-conv"
    d: Optional[int] = None  # embedding width; None -> 128 (tiny-conv) / 2048 (resnet50)
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    probe_widths: Tuple[int, ...] = (512, 256)
    zone_count: int = 9
    in_channels: int = 1
    image_size: Tuple[int, int] = (48, 64)  # (H, W)
    coord_channels: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.backbone not in ("tiny-conv", "resnet50"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.d is not None and self.d <= 0:
            raise ValueError("d must be positive")
        if any(w <= 0 for w in (*self.channels, *self.probe_widths)) or self.zone_count < 1:
            raise ValueError("widths and zone_count must be positive")
        for name in ("channels", "probe_widths", "image_size"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))

    @property
    def embed_dim(self) -> int:
        if self.d is not None:
            return self.d
        return self.channels[-1] if self.backbone == "tiny-conv" else 2048

    def architecture(self) -> dict:
        arch = dataclasses.asdict(self)
        arch.pop("seed")
        arch["d"] = self.embed_dim
        return arch

    def hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class CoordInput(nn.Module):
    """Appends normalized x/y coordinate maps so pooled features keep absolute position."""

    def forward(self, x):
        b, _, h, w = x.shape
        ys = torch.linspace(-1.0, 1.0, h, dtype=x.dtype, device=x.device)
        xs = torch.linspace(-1.0, 1.0, w, dtype=x.dtype, device=x.device)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([xx, yy]).expand(b, 2, h, w)
        return torch.cat([x, coords], dim=1)


def conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class TinyConv(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_in = cfg.in_channels + (2 if cfg.coord_channels else 0)
        layers = [CoordInput()] if cfg.coord_channels else []
        for c in cfg.channels:
            layers.append(conv_block(c_in, c))
            c_in = c
        if cfg.embed_dim != c_in:
            layers.append(nn.Conv2d(c_in, cfg.embed_dim, 1))
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class ResNet50(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        c_in = cfg.in_channels + (2 if cfg.coord_channels else 0)
        net.conv1 = nn.Conv2d(c_in, 64, kernel_size=7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity() if cfg.embed_dim == 2048 else nn.Linear(2048, cfg.embed_dim)
        self.coords = CoordInput() if cfg.coord_channels else nn.Identity()
        self.net = net

    def forward(self, x):
        return self.net(self.coords(x))


class FeatureNorm(nn.Module):
    """Fixed per-dimension standardization of frozen features (statistics set once, not trained)."""

    def __init__(self, d: int):
        super().__init__()
        self.register_buffer("mean", torch.zeros(d))
        self.register_buffer("std", torch.ones(d))

    @torch.no_grad()
    def fit(self, z: torch.Tensor, eps: float = 1e-5):
        self.mean.copy_(z.mean(dim=0))
        self.std.copy_(z.std(dim=0, unbiased=False).clamp_min(eps))

    def forward(self, z):
        return (z - self.mean) / self.std


def probe_head(d: int, widths, out: int) -> nn.Sequential:
    layers, c = [FeatureNorm(d)], d
    for w in widths:
        layers += [nn.Linear(c, w), nn.ReLU(inplace=True)]
        c = w
    layers.append(nn.Linear(c, out))
    return nn.Sequential(*layers)


class GazeModel(nn.Module):
    """Backbone plus auxiliary heads (gaze 3, head pose 6, eye side 2) and optional probe heads."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.backbone = TinyConv(cfg) if cfg.backbone == "tiny-conv" else ResNet50(cfg)
        d = cfg.embed_dim
        self.gaze_head = nn.Linear(d, 3)
        self.pose_head = nn.Linear(d, 6)
        self.side_head = nn.Linear(d, 2)
        self.probes = nn.ModuleDict()

    def _check_input(self, x):
        h, w = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or tuple(x.shape[2:]) != (h, w):
            raise ValueError(
                f"expected input (B, {self.cfg.in_channels}, {h}, {w}), got {tuple(x.shape)}"
            )

    def embed(self, x):
        self._check_input(x)
        return self.backbone(x)

    def forward(self, x):
        z = self.embed(x)
        return z, self.gaze_head(z), self.pose_head(z), self.side_head(z)

    def attach_head(self, kind: str, seed: Optional[int] = None) -> nn.Module:
        if kind not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}, got {kind!r}")
        if seed is not None:
            torch.manual_seed(seed)
        out = 3 if kind == "gaze3d" else self.cfg.zone_count
        self.probes[kind] = probe_head(self.cfg.embed_dim, self.cfg.probe_widths, out)
        return self.probes[kind]

    def has_head(self, kind: str) -> bool:
        return kind in self.probes

    def forward_downstream(self, x, head: str):
        if head not in self.probes:
            raise KeyError(f"downstream head {head!r} is not attached")
        return self.probes[head](self.embed(x))

    def zero_aux_heads(self):
        with torch.no_grad():
            for m in (self.gaze_head, self.pose_head, self.side_head):
                m.weight.zero_()
                m.bias.zero_()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_digest(module: nn.Module) -> str:
    """sha256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: GazeModel, banks: Optional[dict] = None, seed: int = 0,
                    epoch: int = 0, provenance: str = "", extra: Optional[dict] = None) -> Path:
    """Write model (and label banks) to a single ``.npz`` archive with a JSON metadata record."""
    path = Path(path)
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    bank_meta = {}
    for name, bank in (banks or {}).items():
        state = bank.state()
        bank_meta[name] = state.pop("meta")
        arrays.update({f"bank/{name}/{k}": v for k, v in state.items()})
    meta = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "config_hash": model.cfg.hash(),
        "seed": int(seed),
        "epoch": int(epoch),
        "provenance": provenance,
        "heads": sorted(model.probes.keys()),
        "banks": bank_meta,
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, EOFError, ValueError, KeyError, OSError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted checkpoint ({type(e).__name__}: {e})") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    return meta, arrays


def load_checkpoint(path, expected: Optional[ModelConfig] = None):
    """Return ``(model, banks, meta)``.

    Raises :class:`CheckpointError` on a corrupted archive, or when
    ``expected`` describes a different architecture than the stored one.
    """
    from .nll import LabelBank

    meta, arrays = read_checkpoint(path)
    stored = dict(meta["config"])
    cfg = ModelConfig(**stored)
    if cfg.hash() != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected is not None and expected.hash() != meta["config_hash"]:
        raise CheckpointError(
            f"{path}: config hash mismatch (checkpoint {meta['config_hash']}, model {expected.hash()})"
        )
    model = GazeModel(cfg)
    for kind in meta["heads"]:
        model.attach_head(kind)
    state = {k[len("model/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("model/")}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameter mismatch ({e})") from None
    banks = {}
    for name, bmeta in meta["banks"].items():
        prefix = f"bank/{name}/"
        bstate = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        banks[name] = LabelBank.from_state(bstate, bmeta)
    model.eval()
    return model, banks, meta
