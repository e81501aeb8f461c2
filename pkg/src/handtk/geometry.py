"""Small rigid-transform helpers on 4x4 homogeneous matrices (mm, radians)."""

from __future__ import annotations

import numpy as np


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def transform(rotation: np.ndarray | None = None, translation=None) -> np.ndarray:
    T = np.eye(4)
    if rotation is not None:
        T[:3, :3] = rotation
    if translation is not None:
        T[:3, 3] = translation
    return T


def rot_transform(axis, angle: float) -> np.ndarray:
    return transform(rotation_about_axis(np.asarray(axis, dtype=float), angle))


def translation(v) -> np.ndarray:
    return transform(translation=np.asarray(v, dtype=float))


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic x-y-z (roll, pitch, yaw) rotation."""
    rx = rotation_about_axis(np.array([1.0, 0.0, 0.0]), roll)
    ry = rotation_about_axis(np.array([0.0, 1.0, 0.0]), pitch)
    rz = rotation_about_axis(np.array([0.0, 0.0, 1.0]), yaw)
    return rz @ ry @ rx


def pose_transform(xyz, rpy) -> np.ndarray:
    return transform(rpy_matrix(*rpy), xyz)


def apply(T: np.ndarray, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return T[:3, :3] @ p + T[:3, 3]


def rotation_angle(R: np.ndarray) -> float:
    """Magnitude of the rotation encoded in a 3x3 rotation matrix."""
    tr = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(tr))
