"""Quaternion utilities and the SE(3) pose type.

Quaternions are (w, x, y, z) arrays. Poses are world-from-camera: a
camera-frame point x_c maps to the world as R @ x_c + t. The camera looks
along +z of its own frame, x right, y down (OpenCV convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=np.float64, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_log(q: np.ndarray) -> np.ndarray:
    """Log of a unit quaternion, returned as a pure quaternion (0, v)."""
    q = np.asarray(q, dtype=np.float64)
    w = np.clip(q[..., 0], -1.0, 1.0)
    vnorm = np.linalg.norm(q[..., 1:], axis=-1)
    angle = np.arctan2(vnorm, w)
    scale = np.where(vnorm > 1e-14, angle / np.maximum(vnorm, 1e-300), 0.0)
    out = np.zeros_like(q)
    out[..., 1:] = q[..., 1:] * scale[..., None]
    return out


def quat_exp(q: np.ndarray) -> np.ndarray:
    """Exp of a pure quaternion (0, v)."""
    q = np.asarray(q, dtype=np.float64)
    vnorm = np.linalg.norm(q[..., 1:], axis=-1)
    out = np.zeros_like(q)
    out[..., 0] = np.cos(vnorm)
    scale = np.where(vnorm > 1e-14, np.sin(vnorm) / np.maximum(vnorm, 1e-300), 1.0)
    out[..., 1:] = q[..., 1:] * scale[..., None]
    return out


def quat_slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    """Geodesic interpolation between unit quaternions (no hemisphere flip)."""
    dot = float(np.dot(q0, q1))
    dot = min(1.0, max(-1.0, dot))
    theta = np.arccos(dot)
    if theta < 1e-9:
        out = (1.0 - u) * q0 + u * q1  # near-parallel: lerp is exact enough
        return quat_normalize(out)
    s = np.sin(theta)
    return (np.sin((1.0 - u) * theta) * q0 + np.sin(u * theta) * q1) / s


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of unit quaternion(s); batch shape is preserved."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


@dataclass
class Pose:
    """World-from-camera rigid transform (unit quaternion + translation)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def world_to_camera(self) -> tuple[np.ndarray, np.ndarray]:
        """(R, t) with x_c = R @ x_w + t."""
        r = self.rotation_matrix().T
        return r, -r @ self.translation

    def camera_center(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose whose +z camera axis points from position toward target."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nrm = np.linalg.norm(right)
    if nrm < 1e-12:  # forward parallel to up: pick any perpendicular
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        nrm = np.linalg.norm(right)
    right = right / nrm
    down = np.cross(forward, right)
    r_wc = np.stack([right, down, forward], axis=1)
    return Pose(rotation=matrix_to_quat(r_wc), translation=position)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) of a rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    return quat_normalize(q)
