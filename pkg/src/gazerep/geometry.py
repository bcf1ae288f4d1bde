"""Gaze and head-pose vector math.

Camera frame: x right, y down, z away from the camera. A gaze vector points
from the eye toward the target, so a frontal gaze is (0, 0, -1).

Head pose is a 6-vector ``(pitch, yaw, roll, tx, ty, tz)``: three Euler
angles in radians followed by a translation in normalized face-box units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import cv2
import numpy as np

PITCH, YAW, ROLL, TX, TY, TZ = range(6)
ROTATION_DIMS = (PITCH, YAW, ROLL)

SIDES = ("L", "R")


class GeometryError(ValueError):
    """Raised on degenerate geometric input (coincident corners, off-sphere pupils)."""


def _finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


def normalize(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]; in-range values pass through unchanged."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w <= -np.pi, np.pi, w)
    return np.where((a > -np.pi) & (a <= np.pi), a, w)


def pitchyaw_to_vector(pitchyaw):
    """Convert ``(..., 2)`` pitch/yaw in radians to unit gaze vectors ``(..., 3)``.

    Positive pitch looks up, positive yaw looks toward the camera's left.
    """
    py = np.asarray(pitchyaw, dtype=np.float64)
    pitch, yaw = py[..., 0], py[..., 1]
    return np.stack(
        [-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)],
        axis=-1,
    )


def vector_to_pitchyaw(v):
    """Inverse of :func:`pitchyaw_to_vector`; input need not be unit length."""
    v = normalize(v)
    pitch = np.arcsin(np.clip(-v[..., 1], -1.0, 1.0))
    yaw = np.arctan2(-v[..., 0], -v[..., 2])
    return np.stack([pitch, yaw], axis=-1)


def angular_error_deg(a, b):
    """Angle in degrees between gaze directions ``a`` and ``b`` (broadcasting over leading dims).

    Inputs are normalized first, so raw network outputs are accepted.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _finite(a, b)
    cos = np.sum(normalize(a) * normalize(b), axis=-1)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def rotation_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def head_rotation_matrix(head):
    """Rotation matrix of a head pose, composed as ``Rz(roll) @ Ry(yaw) @ Rx(pitch)``."""
    h = np.asarray(head, dtype=np.float64)
    return rotation_z(h[ROLL]) @ rotation_y(h[YAW]) @ rotation_x(h[PITCH])


def matrix_to_euler(R):
    """Recover ``(pitch, yaw, roll)`` from :func:`head_rotation_matrix` output (|yaw| < pi/2)."""
    R = np.asarray(R, dtype=np.float64)
    yaw = np.arcsin(np.clip(-R[2, 0], -1.0, 1.0))
    pitch = np.arctan2(R[2, 1], R[2, 2])
    roll = np.arctan2(R[1, 0], R[0, 0])
    return np.array([pitch, yaw, roll])


def flip_gaze(gaze):
    g = np.array(gaze, dtype=np.float64, copy=True)
    g[..., 0] = -g[..., 0]
    return g


def flip_head(head):
    h = np.array(head, dtype=np.float64, copy=True)
    h[..., YAW] = -h[..., YAW]
    h[..., ROLL] = -h[..., ROLL]
    h[..., TX] = -h[..., TX]
    return h


def flip_side(side: str) -> str:
    if side not in SIDES:
        raise ValueError(f"side must be 'L' or 'R', got {side!r}")
    return "R" if side == "L" else "L"


def flip_labels(gaze=None, head=None, side: Optional[str] = None):
    """Labels of a horizontally mirrored sample.

    Gaze x is negated; head yaw, roll and x-translation are negated; the eye
    side swaps. Any argument may be ``None`` and is passed through. Applying
    the function twice returns the input.
    """
    return (
        None if gaze is None else flip_gaze(gaze),
        None if head is None else flip_head(head),
        None if side is None else flip_side(side),
    )


# --------------------------------------------------------------------------
# sample normalization


@dataclass(frozen=True)
class NormalizeConfig:
    eye_width_px: float = 24.0
    patch_width: int = 64
    patch_height: int = 48


class NormalizedSample(NamedTuple):
    image: np.ndarray
    landmarks: "object"
    rotation: np.ndarray  # 3x3, maps original camera-frame labels into the normalized frame
    scale: float


def eye_axis(corners) -> Tuple[np.ndarray, float, float]:
    """Midpoint, roll angle in (-pi/2, pi/2] and length of the corner-to-corner axis."""
    corners = np.asarray(corners, dtype=np.float64)
    d = corners[1] - corners[0]
    length = float(np.hypot(d[0], d[1]))
    if not np.isfinite(length) or length < 1e-9:
        raise GeometryError("eye corners coincide")
    angle = float(np.arctan2(d[1], d[0]))
    if angle > np.pi / 2:
        angle -= np.pi
    elif angle <= -np.pi / 2:
        angle += np.pi
    return corners.mean(axis=0), angle, length


def _warp_points(points, A, src_center, dst_center):
    p = np.asarray(points, dtype=np.float64)
    return (p - src_center) @ A.T + dst_center


def normalize_sample(image, landmarks, head=None, cfg: NormalizeConfig = NormalizeConfig()):
    """Remove in-plane roll and rescale an eye patch to a canonical eye width.

    The corner axis becomes horizontal, the corner distance becomes
    ``cfg.eye_width_px`` and the corner midpoint lands at the patch centre.
    ``landmarks`` is any object with ``corners``, ``contour`` and ``pupil``
    arrays and a ``replace(**fields)`` method (see
    :class:`gazerep.pseudolabel.EyeLandmarks`). Pixel centres sit at
    half-integer coordinates.

    Returns a :class:`NormalizedSample`. Camera-frame labels map into the
    normalized frame by ``rotation @ g``; ``rotation.T`` undoes it.
    """
    if head is not None:
        _finite(np.asarray(head, dtype=np.float64))
    mid, angle, length = eye_axis(landmarks.corners)
    scale = cfg.eye_width_px / length
    c, s = np.cos(-angle), np.sin(-angle)
    A = scale * np.array([[c, -s], [s, c]])
    dst = np.array([cfg.patch_width / 2.0, cfg.patch_height / 2.0])

    # cv2 puts pixel centres on integers
    offset = A @ (0.5 - mid) + dst - 0.5
    M = np.hstack([A, offset[:, None]])
    img = np.asarray(image, dtype=np.float32)
    warped = cv2.warpAffine(
        img, M, (cfg.patch_width, cfg.patch_height),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE,
    )
    new_lm = landmarks.replace(
        corners=_warp_points(landmarks.corners, A, mid, dst),
        contour=_warp_points(landmarks.contour, A, mid, dst),
        pupil=_warp_points(landmarks.pupil, A, mid, dst),
    )
    return NormalizedSample(warped, new_lm, rotation_z(-angle), float(scale))


def rotate_labels(rotation, gaze=None, head=None):
    """Apply a normalization rotation to gaze and head-pose labels."""
    R = np.asarray(rotation, dtype=np.float64)
    g = None if gaze is None else np.asarray(gaze, dtype=np.float64) @ R.T
    h = None
    if head is not None:
        h = np.array(head, dtype=np.float64, copy=True)
        h[:3] = matrix_to_euler(R @ head_rotation_matrix(h))
        h[3:] = R @ h[3:]
    return g, h
