"""Auxiliary supervision: line-of-sight pseudo-gaze, head pose and eye side.

The eyeball is a sphere of radius ``radius_px`` centred on the corner
midpoint at reference depth ``z0``. The pupil is lifted onto the
camera-facing hemisphere and the pseudo-gaze is the unit vector from the
eyeball centre to the lifted pupil.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import cv2
import numpy as np

from .geometry import (
    ROTATION_DIMS,
    SIDES,
    GeometryError,
    normalize,
    wrap_angle,
)

log = logging.getLogger(__name__)

DEFAULT_RADIUS_PX = 12.0


class LabelError(ValueError):
    """A labeler could not produce labels for a sample."""


@dataclass(frozen=True)
class EyeLandmarks:
    """Eye landmarks in pixel coordinates (pixel centres at half-integers).

    ``corners`` is ``(2, 2)`` ordered (inner, outer); ``contour`` is ``(n, 2)``
    with ``n >= 4`` points on the eyelid margins; ``pupil`` is ``(2,)``.
    """

    corners: np.ndarray
    contour: np.ndarray
    pupil: np.ndarray

    def __post_init__(self):
        for name in ("corners", "contour", "pupil"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.corners.shape != (2, 2):
            raise ValueError(f"corners must be (2, 2), got {self.corners.shape}")
        if self.contour.ndim != 2 or self.contour.shape[1] != 2 or len(self.contour) < 4:
            raise ValueError(f"contour must be (n>=4, 2), got {self.contour.shape}")
        if self.pupil.shape != (2,):
            raise ValueError(f"pupil must be (2,), got {self.pupil.shape}")

    def replace(self, **fields) -> "EyeLandmarks":
        return dataclasses.replace(self, **fields)

    @property
    def midpoint(self) -> np.ndarray:
        return self.corners.mean(axis=0)

    def validate(self, width: Optional[int] = None, height: Optional[int] = None) -> bool:
        """Check corner distinctness and bounds; warn (not raise) when the pupil leaves the eye hull."""
        if np.allclose(self.corners[0], self.corners[1]):
            raise GeometryError("eye corners coincide")
        if width is not None and height is not None:
            pts = np.vstack([self.corners, self.contour, self.pupil[None]])
            if pts.min() < 0 or np.any(pts[:, 0] > width) or np.any(pts[:, 1] > height):
                raise GeometryError("landmarks outside image bounds")
        hull = cv2.convexHull(np.vstack([self.corners, self.contour]).astype(np.float32))
        inside = cv2.pointPolygonTest(hull, tuple(float(x) for x in self.pupil), False) >= 0
        if not inside:
            log.warning("pupil outside eyelid hull (blink or occlusion?)")
        return inside


@dataclass
class PseudoLabelSet:
    pseudo_gaze: np.ndarray
    head_pose: np.ndarray
    side: str
    source: str
    noise_record: Optional[dict] = None

    def __post_init__(self):
        self.pseudo_gaze = normalize(np.asarray(self.pseudo_gaze, dtype=np.float64))
        self.head_pose = np.asarray(self.head_pose, dtype=np.float64)
        if self.pseudo_gaze.shape != (3,) or self.head_pose.shape != (6,):
            raise ValueError("pseudo_gaze must be (3,) and head_pose (6,)")
        if self.side not in SIDES:
            raise ValueError(f"side must be L or R, got {self.side!r}")


# --------------------------------------------------------------------------
# eyeball geometry


def eyeball_center(lm: EyeLandmarks, radius_px: float = DEFAULT_RADIUS_PX, z0: float = 0.0):
    if radius_px <= 0:
        raise GeometryError("radius_px must be positive")
    if np.allclose(lm.corners[0], lm.corners[1]):
        raise GeometryError("eye corners coincide")
    mid = lm.midpoint
    return np.array([mid[0], mid[1], z0])


def los_pseudo_gaze(lm: EyeLandmarks, radius_px: float = DEFAULT_RADIUS_PX, z0: float = 0.0):
    """Unit gaze vector from the eyeball centre to the pupil lifted onto the sphere.

    Raises :class:`GeometryError` when the pupil offset reaches the sphere
    radius (no camera-facing surface point exists).
    """
    c = eyeball_center(lm, radius_px, z0)
    d = lm.pupil - c[:2]
    d2 = float(d @ d)
    if d2 >= radius_px**2:
        raise GeometryError(f"pupil offset {np.sqrt(d2):.3f} px is off the {radius_px} px eyeball")
    P = np.array([lm.pupil[0], lm.pupil[1], z0 - np.sqrt(radius_px**2 - d2)])
    return normalize(P - c)


def sphere_pupil_position(gaze, center_2d, radius_px: float = DEFAULT_RADIUS_PX):
    """Image position of the pupil for a gaze direction; exact inverse of :func:`los_pseudo_gaze`."""
    g = normalize(gaze)
    if g[..., 2] >= 0:
        raise GeometryError("gaze must face the camera (negative z)")
    return np.asarray(center_2d, dtype=np.float64) + radius_px * g[..., :2]


# --------------------------------------------------------------------------
# labelers


class Labeler(Protocol):
    source: str

    def label(self, sample) -> PseudoLabelSet: ...


@dataclass
class OracleLabeler:
    """Reads the renderer's ground truth from a synthetic sample."""

    source: str = "oracle"

    def label(self, sample) -> PseudoLabelSet:
        gaze = sample.render_gaze if sample.render_gaze is not None else sample.gt_gaze
        if gaze is None or sample.gt_head is None:
            raise LabelError(f"sample {sample.id}: oracle labeler needs render/gt gaze and gt_head")
        return PseudoLabelSet(gaze, sample.gt_head, sample.side, self.source)


@dataclass
class GeometricLabeler:
    """Line-of-sight gaze from stored landmarks.

    Head pose stands in for the teacher network: it is copied from
    ``sample.gt_head`` (or ``sample.pseudo_head`` when ``head_from="external"``).
    """

    radius_px: float = DEFAULT_RADIUS_PX
    z0: float = 0.0
    head_from: str = "gt"
    source: str = "geometric"

    def label(self, sample) -> PseudoLabelSet:
        if sample.landmarks is None:
            raise LabelError(f"sample {sample.id}: geometric labeler needs landmarks")
        gaze = los_pseudo_gaze(sample.landmarks, self.radius_px, self.z0)
        if self.head_from == "external":
            head = sample.pseudo_head
        else:
            head = sample.gt_head
        if head is None:
            raise LabelError(f"sample {sample.id}: no head pose available ({self.head_from})")
        return PseudoLabelSet(gaze, head, sample.side, self.source)


@dataclass
class ExternalLabeler:
    """Precomputed teacher outputs carried by the manifest (pseudo_gaze, pseudo_head)."""

    source: str = "external"

    def label(self, sample) -> PseudoLabelSet:
        missing = [n for n in ("pseudo_gaze", "pseudo_head") if getattr(sample, n) is None]
        if missing:
            raise LabelError(f"sample {sample.id}: external labels missing {', '.join(missing)}")
        return PseudoLabelSet(sample.pseudo_gaze, sample.pseudo_head, sample.side, self.source, sample.noise_record)


LABELERS = {"oracle": OracleLabeler, "geometric": GeometricLabeler, "external": ExternalLabeler}


def make_labeler(name: str, **kwargs) -> Labeler:
    try:
        return LABELERS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown labeler {name!r}; choose from {sorted(LABELERS)}") from None


def label_sample(labeler: Labeler, sample) -> PseudoLabelSet:
    return labeler.label(sample)


def label_corpus(labeler: Labeler, samples, skip_off_sphere: bool = True):
    """Label every sample; off-sphere (blink) samples are dropped when ``skip_off_sphere``.

    Returns ``(kept_samples, labels)``.
    """
    kept, labels = [], []
    for s in samples:
        try:
            labels.append(labeler.label(s))
        except GeometryError:
            if not skip_off_sphere:
                raise
            log.info("dropping %s: pupil off the eyeball sphere", s.id)
            continue
        kept.append(s)
    return kept, labels


# --------------------------------------------------------------------------
# noise injection


@dataclass(frozen=True)
class NoiseConfig:
    gaze_sigma_deg: float = 0.0
    pose_sigma_rad: float = 0.0
    corrupt_fraction: float = 0.0
    large_corrupt_deg: float = 20.0

    def __post_init__(self):
        if self.gaze_sigma_deg < 0 or self.pose_sigma_rad < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError("corrupt_fraction must lie in [0, 1]")


def tangent_basis(g):
    """Two unit vectors orthogonal to each row of ``g`` (and to each other)."""
    g = normalize(g)
    helper = np.where(np.abs(g[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    e1 = normalize(np.cross(g, helper))
    e2 = np.cross(g, e1)
    return e1, e2


def rotate_toward(g, e1, e2, angle, phi):
    """Rotate unit rows ``g`` by ``angle`` radians toward tangent direction ``phi``."""
    u = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
    return normalize(np.cos(angle)[:, None] * g + np.sin(angle)[:, None] * u)


def perturb_gaze(gaze, cfg: NoiseConfig, rng: np.random.Generator):
    """Return ``(noisy_gaze, corrupted_mask)`` for an ``(n, 3)`` array of unit vectors.

    Every row is rotated by a 2-D Gaussian tangent offset with per-axis std
    ``gaze_sigma_deg`` (so the angular error is Rayleigh distributed).
    Exactly ``round(corrupt_fraction * n)`` rows are then rotated by
    ``large_corrupt_deg`` in a uniformly random tangent direction.
    """
    g = normalize(np.atleast_2d(gaze))
    n = len(g)
    offsets = rng.normal(0.0, np.radians(cfg.gaze_sigma_deg), size=(n, 2))
    e1, e2 = tangent_basis(g)
    angle = np.hypot(offsets[:, 0], offsets[:, 1])
    out = rotate_toward(g, e1, e2, angle, np.arctan2(offsets[:, 1], offsets[:, 0]))

    n_bad = int(round(cfg.corrupt_fraction * n))
    mask = np.zeros(n, dtype=bool)
    if n_bad:
        idx = rng.choice(n, size=n_bad, replace=False)
        mask[idx] = True
        phi = rng.uniform(0.0, 2 * np.pi, size=n_bad)
        b1, b2 = tangent_basis(out[idx])
        out[idx] = rotate_toward(out[idx], b1, b2, np.full(n_bad, np.radians(cfg.large_corrupt_deg)), phi)
    return out, mask


def perturb_head(head, sigma: float, rng: np.random.Generator):
    h = np.array(np.atleast_2d(head), dtype=np.float64, copy=True)
    h += rng.normal(0.0, sigma, size=h.shape)
    rot = list(ROTATION_DIMS)
    h[:, rot] = wrap_angle(h[:, rot])
    return h


def inject_noise(labels: Sequence[PseudoLabelSet], cfg: NoiseConfig, seed: int):
    """Corrupt a corpus of pseudo-labels; bit-reproducible for a given seed."""
    rng = np.random.default_rng(seed)
    gaze = np.stack([l.pseudo_gaze for l in labels]) if labels else np.zeros((0, 3))
    head = np.stack([l.head_pose for l in labels]) if labels else np.zeros((0, 6))
    noisy_gaze, mask = perturb_gaze(gaze, cfg, rng)
    noisy_head = perturb_head(head, cfg.pose_sigma_rad, rng)
    record = dataclasses.asdict(cfg) | {"kind": "gaze_rotation+pose_gaussian", "seed": int(seed)}
    return [
        PseudoLabelSet(g, h, l.side, l.source, record | {"corrupted": bool(m)})
        for l, g, h, m in zip(labels, noisy_gaze, noisy_head, mask)
    ]
