"""Parametric eye-patch renderer with exact ground truth, and the manifest format.

The renderer places the iris at the sphere projection of the render gaze,
which is the exact inverse of :func:`gazerep.pseudolabel.los_pseudo_gaze`.
Head pose changes eye shape only: roll rotates the eyelids, yaw skews the
lid apex and narrows the eye, pitch opens or closes the aperture, and the
x/y translation shifts the eye within the patch.

Each subject carries a constant gaze bias (pitch, yaw) between the rendered
optical axis and the ground-truth gaze. The yaw part is mirrored for left
eyes so that horizontal flips stay label-consistent within a subject.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import (
    PITCH,
    ROLL,
    SIDES,
    TX,
    TY,
    YAW,
    pitchyaw_to_vector,
    vector_to_pitchyaw,
)
from .pseudolabel import DEFAULT_RADIUS_PX, EyeLandmarks, PseudoLabelSet

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
SUPERSAMPLE = 4
TRANSLATION_PX = 40.0  # pixels per unit of head translation
N_CONTOUR = 6  # points per eyelid


class RenderError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Appearance:
    skin: float = 0.62
    sclera: float = 0.88
    iris: float = 0.30
    pupil: float = 0.06
    lash: float = 0.25
    duct: float = 0.38
    iris_radius_px: float = 4.2
    aperture_up: float = 6.5
    aperture_lo: float = 5.5
    grad_x: float = 0.0
    grad_y: float = 0.0

    def flipped(self) -> "Appearance":
        return dataclasses.replace(self, grad_x=-self.grad_x)


@dataclass(frozen=True)
class CorpusConfig:
    n_subjects: int = 10
    samples_per_subject: int = 200
    patch_width: int = 64
    patch_height: int = 48
    pitch_range_deg: Tuple[float, float] = (-15.0, 15.0)
    yaw_range_deg: Tuple[float, float] = (-20.0, 20.0)
    head_pitch_range_deg: Tuple[float, float] = (-15.0, 15.0)
    head_yaw_range_deg: Tuple[float, float] = (-20.0, 20.0)
    head_roll_range_deg: Tuple[float, float] = (-15.0, 15.0)
    translation_range: Tuple[float, float] = (-0.08, 0.08)
    depth_range: Tuple[float, float] = (0.9, 1.1)
    eye_width_px: float = 24.0
    radius_px: float = DEFAULT_RADIUS_PX
    # appearance jitter: per-subject base values, per-sample spread
    iris_darkness: Tuple[float, float] = (0.15, 0.45)
    sclera_brightness: Tuple[float, float] = (0.75, 0.95)
    illumination_gradient: float = 0.15
    eyelid_aperture: Tuple[float, float] = (5.8, 7.2)
    pixel_noise: float = 0.01
    subject_bias_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("pitch_range_deg", "yaw_range_deg", "head_pitch_range_deg", "head_yaw_range_deg",
                     "head_roll_range_deg", "translation_range", "depth_range", "iris_darkness",
                     "sclera_brightness", "eyelid_aperture"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.n_subjects < 1 or self.samples_per_subject < 1:
            raise ValueError("n_subjects and samples_per_subject must be positive")
        if self.radius_px <= 0 or self.eye_width_px <= 0:
            raise ValueError("radius_px and eye_width_px must be positive")


# --------------------------------------------------------------------------
# samples


@dataclass
class EyeSample:
    id: str
    subject: str
    side: str
    landmarks: Optional[EyeLandmarks] = None
    gt_gaze: Optional[np.ndarray] = None
    gt_head: Optional[np.ndarray] = None
    gt_zone: Optional[int] = None
    render_gaze: Optional[np.ndarray] = None
    pseudo_gaze: Optional[np.ndarray] = None
    pseudo_head: Optional[np.ndarray] = None
    noise_record: Optional[dict] = None
    image_path: Optional[str] = None
    root: Optional[Path] = field(default=None, repr=False)
    _image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def image(self) -> np.ndarray:
        """H x W float32 image in [0, 1]; read from disk on first access."""
        if self._image is None:
            if self.image_path is None:
                raise ManifestError(f"sample {self.id} has neither an image nor an image_path")
            path = Path(self.root or ".") / self.image_path
            with Image.open(path) as im:
                self._image = np.asarray(im, dtype=np.float32) / 255.0
        return self._image

    @image.setter
    def image(self, value):
        self._image = None if value is None else np.asarray(value, dtype=np.float32)

    @property
    def pseudo(self) -> Optional[PseudoLabelSet]:
        if self.pseudo_gaze is None or self.pseudo_head is None:
            return None
        return PseudoLabelSet(self.pseudo_gaze, self.pseudo_head, self.side, "external", self.noise_record)

    def with_pseudo(self, labels: PseudoLabelSet) -> "EyeSample":
        return dataclasses.replace(
            self, pseudo_gaze=labels.pseudo_gaze, pseudo_head=labels.head_pose,
            noise_record=labels.noise_record,
        )


# --------------------------------------------------------------------------
# rendering


def _subpixel_grid(height: int, width: int, s: int = SUPERSAMPLE):
    offs = (np.arange(s) + 0.5) / s
    ys = (np.arange(height)[:, None] + offs[None, :]).ravel()
    xs = (np.arange(width)[:, None] + offs[None, :]).ravel()
    return np.meshgrid(xs, ys)


_GRIDS = {}


def _grid(height, width):
    key = (height, width)
    if key not in _GRIDS:
        _GRIDS[key] = _subpixel_grid(height, width)
    return _GRIDS[key]


def _lid_profile(u, half_width, apex):
    """1 at the apex, 0 at both corners, negative outside the eye."""
    left = 1.0 - ((u - apex) / (-half_width - apex)) ** 2
    right = 1.0 - ((u - apex) / (half_width - apex)) ** 2
    f = np.where(u < apex, left, right)
    return np.where(np.abs(u) < half_width, f, -1.0)


@dataclass(frozen=True)
class EyeGeometry:
    center: np.ndarray
    axis: np.ndarray  # unit vector from the image-left end toward the image-right end (roll applied)
    normal: np.ndarray
    half_width: float
    apex: float
    up: float
    lo: float

    def to_local(self, x, y):
        dx, dy = x - self.center[0], y - self.center[1]
        return dx * self.axis[0] + dy * self.axis[1], dx * self.normal[0] + dy * self.normal[1]

    def to_image(self, u, v):
        return self.center + np.outer(u, self.axis) + np.outer(v, self.normal)

    def lid_bounds(self, u):
        f = _lid_profile(u, self.half_width, self.apex)
        return -self.up * f, self.lo * f


def eye_geometry(head, appearance: Appearance, cfg: CorpusConfig) -> EyeGeometry:
    h = np.asarray(head, dtype=np.float64)
    center = np.array([cfg.patch_width / 2.0 + TRANSLATION_PX * h[TX],
                       cfg.patch_height / 2.0 + TRANSLATION_PX * h[TY]])
    roll = h[ROLL]
    axis = np.array([math.cos(roll), math.sin(roll)])
    normal = np.array([-math.sin(roll), math.cos(roll)])
    half_width = cfg.eye_width_px / 2.0 * (0.85 + 0.15 * math.cos(h[YAW]))
    apex = 0.35 * half_width * math.sin(h[YAW])
    up = appearance.aperture_up * (1.0 + 0.6 * math.sin(h[PITCH]))
    lo = appearance.aperture_lo * (1.0 - 0.3 * math.sin(h[PITCH]))
    return EyeGeometry(center, axis, normal, half_width, apex, up, lo)


def eye_landmarks(geom: EyeGeometry, side: str, pupil) -> EyeLandmarks:
    ends = geom.to_image(np.array([-geom.half_width, geom.half_width]), np.zeros(2))
    inner, outer = (ends[0], ends[1]) if side == "L" else (ends[1], ends[0])
    u = np.linspace(-geom.half_width, geom.half_width, N_CONTOUR + 2)[1:-1]
    v_up, v_lo = geom.lid_bounds(u)
    contour = np.vstack([geom.to_image(u, v_up), geom.to_image(u[::-1], v_lo[::-1])])
    return EyeLandmarks(np.stack([inner, outer]), contour, np.asarray(pupil, dtype=np.float64))


def render_eye_patch(gaze, head, side: str, appearance: Appearance = Appearance(),
                     cfg: CorpusConfig = CorpusConfig()):
    """Render one eye patch; returns ``(image, landmarks)``.

    ``gaze`` is the optical-axis direction whose sphere projection places the
    pupil. Raises :class:`RenderError` if the pupil would leave the visible
    sclera.
    """
    if side not in SIDES:
        raise ValueError(f"side must be L or R, got {side!r}")
    g = np.asarray(gaze, dtype=np.float64)
    g = g / np.linalg.norm(g)
    if g[2] >= 0:
        raise RenderError("gaze must face the camera")
    geom = eye_geometry(head, appearance, cfg)
    pupil = geom.center + cfg.radius_px * g[:2]
    pu, pv = geom.to_local(pupil[0], pupil[1])
    lo_b, hi_b = geom.lid_bounds(np.array([pu]))
    if not (lo_b[0] < pv < hi_b[0]):
        raise RenderError(f"pupil at local ({pu:.2f}, {pv:.2f}) leaves the sclera")

    X, Y = _grid(cfg.patch_height, cfg.patch_width)
    u, v = geom.to_local(X, Y)
    v_up, v_lo = geom.lid_bounds(u)
    inside = (v > v_up) & (v < v_lo)
    lash = ~inside & (v > v_up - 1.0) & (v <= v_up) & (np.abs(u) < geom.half_width)

    a = appearance
    img = np.full(X.shape, a.skin)
    img[lash] = a.lash
    img[inside] = a.sclera
    r2 = (X - pupil[0]) ** 2 + (Y - pupil[1]) ** 2
    img[inside & (r2 < a.iris_radius_px**2)] = a.iris
    img[inside & (r2 < (0.45 * a.iris_radius_px) ** 2)] = a.pupil

    # tear duct sits just inside the inner corner
    s = -1.0 if side == "L" else 1.0
    duct = geom.to_image(np.array([s * (geom.half_width - 1.2)]), np.array([0.3]))[0]
    img[(X - duct[0]) ** 2 + (Y - duct[1]) ** 2 < 1.8**2] = a.duct

    xn = (X - cfg.patch_width / 2.0) / cfg.patch_width
    yn = (Y - cfg.patch_height / 2.0) / cfg.patch_height
    img = img * (1.0 + a.grad_x * xn + a.grad_y * yn)
    k = SUPERSAMPLE
    img = img.reshape(cfg.patch_height, k, cfg.patch_width, k).mean(axis=(1, 3))
    return np.clip(img, 0.0, 1.0), eye_landmarks(geom, side, pupil)


def quantize(image) -> np.ndarray:
    """Round-trip through 8 bits so in-memory corpora match PNG-backed ones."""
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)).astype(np.float32) / 255.0


# --------------------------------------------------------------------------
# corpus generation


def subject_bias(cfg: CorpusConfig, subject_index: int) -> np.ndarray:
    """(pitch, yaw) bias in radians for a right eye; left eyes negate the yaw."""
    rng = np.random.default_rng([cfg.seed, subject_index, 1])
    phi = rng.uniform(0.0, 2 * np.pi)
    return np.radians(cfg.subject_bias_deg) * np.array([math.sin(phi), math.cos(phi)])


def _subject_appearance(cfg: CorpusConfig, rng) -> Appearance:
    return Appearance(
        skin=rng.uniform(0.5, 0.7),
        sclera=rng.uniform(*cfg.sclera_brightness),
        iris=rng.uniform(*cfg.iris_darkness),
        iris_radius_px=rng.uniform(3.8, 4.6),
        aperture_up=rng.uniform(*cfg.eyelid_aperture),
        aperture_lo=rng.uniform(*cfg.eyelid_aperture) * 0.85,
    )


def _jitter(base: Appearance, cfg: CorpusConfig, rng) -> Appearance:
    g = cfg.illumination_gradient
    return dataclasses.replace(
        base,
        skin=base.skin + rng.uniform(-0.04, 0.04),
        sclera=min(base.sclera + rng.uniform(-0.03, 0.03), 1.0),
        grad_x=rng.uniform(-g, g),
        grad_y=rng.uniform(-g, g),
    )


def _uniform_deg(rng, bounds):
    return math.radians(rng.uniform(*bounds))


def synthesize(cfg: CorpusConfig) -> List[EyeSample]:
    """Render the corpus in memory. Sample ``j`` of subject ``i`` uses seed ``(cfg.seed, i, j)``."""
    samples = []
    width = max(2, len(str(cfg.n_subjects - 1)))
    for i in range(cfg.n_subjects):
        subject = f"s{i:0{width}d}"
        base = _subject_appearance(cfg, np.random.default_rng([cfg.seed, i, 0]))
        bias = subject_bias(cfg, i)
        for j in range(cfg.samples_per_subject):
            rng = np.random.default_rng([cfg.seed, i, 2, j])
            side = SIDES[int(rng.integers(2))]
            py = np.array([_uniform_deg(rng, cfg.pitch_range_deg), _uniform_deg(rng, cfg.yaw_range_deg)])
            head = np.array([
                _uniform_deg(rng, cfg.head_pitch_range_deg),
                _uniform_deg(rng, cfg.head_yaw_range_deg),
                _uniform_deg(rng, cfg.head_roll_range_deg),
                rng.uniform(*cfg.translation_range),
                rng.uniform(*cfg.translation_range),
                rng.uniform(*cfg.depth_range),
            ])
            appearance = _jitter(base, cfg, rng)
            render_gaze = pitchyaw_to_vector(py)
            side_bias = bias * (1.0 if side == "R" else np.array([1.0, -1.0]))
            gt_gaze = pitchyaw_to_vector(py + side_bias)
            img, lm = render_eye_patch(render_gaze, head, side, appearance, cfg)
            if cfg.pixel_noise > 0:
                img = img + rng.normal(0.0, cfg.pixel_noise, img.shape)
            s = EyeSample(
                id=f"{subject}_{j:05d}", subject=subject, side=side, landmarks=lm,
                gt_gaze=gt_gaze, gt_head=head, render_gaze=render_gaze,
            )
            s.image = quantize(img)
            samples.append(s)
    return samples


def generate_corpus(cfg: CorpusConfig, out_dir) -> Path:
    """Render the corpus to ``out_dir`` (PNG images + manifest); returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    samples = synthesize(cfg)
    for s in samples:
        s.image_path = f"images/{s.id}.png"
        Image.fromarray(np.round(s.image * 255.0).astype(np.uint8), mode="L").save(out / s.image_path)
        s.root = out
    path = out / MANIFEST_NAME
    write_manifest(samples, path)
    with open(out / "corpus_config.json", "w") as f:
        json.dump(dataclasses.asdict(cfg), f, indent=2, sort_keys=True)
    return path


# --------------------------------------------------------------------------
# manifest


def _floats(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def sample_to_record(s: EyeSample) -> dict:
    rec = {"id": s.id, "subject": s.subject, "side": s.side, "image_path": s.image_path}
    if s.landmarks is not None:
        rec["landmarks"] = _floats(np.vstack([s.landmarks.corners, s.landmarks.contour]))
        rec["pupil"] = _floats(s.landmarks.pupil)
    for name in ("gt_gaze", "gt_head"):
        if getattr(s, name) is not None:
            rec[name] = _floats(getattr(s, name))
    if s.gt_zone is not None:
        rec["gt_zone"] = int(s.gt_zone)
    for name in ("pseudo_gaze", "pseudo_head", "render_gaze"):
        if getattr(s, name) is not None:
            rec[name] = _floats(getattr(s, name))
    if s.noise_record is not None:
        rec["noise_record"] = s.noise_record
    return rec


def write_manifest(samples: Iterable[EyeSample], path) -> Path:
    path = Path(path)
    seen = set()
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id}")
            seen.add(s.id)
            f.write(json.dumps(sample_to_record(s)) + "\n")
    return path


_VECTOR_FIELDS = {"gt_gaze": 3, "gt_head": 6, "pseudo_gaze": 3, "pseudo_head": 6, "render_gaze": 3, "pupil": 2}


def record_to_sample(rec: dict, root: Path, row: int) -> EyeSample:
    def vec(name):
        if name not in rec:
            return None
        v = rec[name]
        if not isinstance(v, list) or len(v) != _VECTOR_FIELDS[name]:
            raise ManifestError(f"row {row}: field {name} needs {_VECTOR_FIELDS[name]} numbers, got {v!r}")
        a = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ManifestError(f"row {row}: field {name} is not finite")
        return a

    for key in ("id", "subject", "side"):
        if not isinstance(rec.get(key), str):
            raise ManifestError(f"row {row}: missing or non-string field {key}")
    if rec["side"] not in SIDES:
        raise ManifestError(f"row {row}: side must be L or R, got {rec['side']!r}")
    landmarks = None
    if "landmarks" in rec:
        flat = rec["landmarks"]
        pupil = vec("pupil")
        if not isinstance(flat, list) or len(flat) % 2 or len(flat) < 12 or pupil is None:
            raise ManifestError(f"row {row}: landmarks need >= 6 (x, y) points plus a pupil")
        pts = np.asarray(flat, dtype=np.float64).reshape(-1, 2)
        landmarks = EyeLandmarks(pts[:2], pts[2:], pupil)
    zone = rec.get("gt_zone")
    if zone is not None and (not isinstance(zone, int) or zone < 0):
        raise ManifestError(f"row {row}: gt_zone must be a non-negative integer")
    return EyeSample(
        id=rec["id"], subject=rec["subject"], side=rec["side"], landmarks=landmarks,
        gt_gaze=vec("gt_gaze"), gt_head=vec("gt_head"), gt_zone=zone,
        render_gaze=vec("render_gaze"), pseudo_gaze=vec("pseudo_gaze"), pseudo_head=vec("pseudo_head"),
        noise_record=rec.get("noise_record"), image_path=rec.get("image_path"), root=root,
    )


def split_of(sample_id: str, split_seed: int = 0, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> str:
    """Deterministic train/val/test assignment from a hash of ``(split_seed, id)``."""
    digest = hashlib.sha256(f"{split_seed}:{sample_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0**64
    total = float(sum(fractions))
    edges = np.cumsum(fractions) / total
    for name, edge in zip(("train", "val", "test"), edges):
        if u < edge:
            return name
    return "test"


def load_manifest(path, subjects=None, sides=None, split=None, split_seed: int = 0,
                  split_fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  check_images: bool = True) -> List[EyeSample]:
    """Read a manifest, keeping rows that pass the filters, in file order. Images load lazily."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    root = path.parent
    subjects = None if subjects is None else set(subjects)
    sides = None if sides is None else set(sides)
    out, seen = [], set()
    with open(path, encoding="utf-8") as f:
        for row, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"row {row}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestError(f"row {row}: record must be an object")
            s = record_to_sample(rec, root, row)
            if s.id in seen:
                raise ManifestError(f"row {row}: duplicate id {s.id}")
            seen.add(s.id)
            if subjects is not None and s.subject not in subjects:
                continue
            if sides is not None and s.side not in sides:
                continue
            if split is not None and split_of(s.id, split_seed, split_fractions) != split:
                continue
            if check_images and s.image_path is not None and not (root / s.image_path).exists():
                raise ManifestError(f"row {row}: image file {s.image_path} not found")
            out.append(s)
    return out


# --------------------------------------------------------------------------
# zone labels


def zone_of(pitchyaw, n_side: int, pitch_range, yaw_range) -> np.ndarray:
    py = np.atleast_2d(pitchyaw)

    def cell(x, lo, hi):
        idx = np.floor((x - lo) / (hi - lo) * n_side).astype(int)
        return np.clip(idx, 0, n_side - 1)

    return cell(py[:, 0], *pitch_range) * n_side + cell(py[:, 1], *yaw_range)


def derive_zone_labels(samples: Sequence[EyeSample], Z: int = 9, pitch_range_deg=None,
                       yaw_range_deg=None) -> List[EyeSample]:
    """Tile pitch/yaw into a sqrt(Z) x sqrt(Z) grid (rows = pitch, row-major) and label each sample.

    Ranges default to the min/max of the samples' gaze.
    """
    n_side = int(round(math.sqrt(Z)))
    if n_side * n_side != Z or Z < 1:
        raise ValueError(f"Z must be a perfect square, got {Z}")
    missing = [s.id for s in samples if s.gt_gaze is None]
    if missing:
        raise ValueError(f"gt_gaze missing for {len(missing)} samples (first: {missing[0]})")
    py = vector_to_pitchyaw(np.stack([s.gt_gaze for s in samples]))
    pr = np.radians(pitch_range_deg) if pitch_range_deg is not None else (py[:, 0].min(), py[:, 0].max())
    yr = np.radians(yaw_range_deg) if yaw_range_deg is not None else (py[:, 1].min(), py[:, 1].max())
    zones = zone_of(py, n_side, pr, yr)
    return [dataclasses.replace(s, gt_zone=int(z)) for s, z in zip(samples, zones)]


def mirror_image(image) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])
