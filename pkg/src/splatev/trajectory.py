"""Continuous SE(3) camera trajectory from discrete posed samples.

Translation is interpolated with natural cubic splines per axis; rotation
with spherical cubic interpolation (squad, finite-difference inner control
quaternions, hemisphere-aligned knots). A piecewise-linear / slerp variant
is kept for ablation comparisons. Queries outside the knot range raise --
extrapolated poses would silently corrupt training supervision.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DataError
from .geometry import (
    Pose,
    quat_conjugate,
    quat_exp,
    quat_log,
    quat_multiply,
    quat_normalize,
    quat_slerp,
)

POSE_CSV_HEADER = "# world-from-camera poses: t_ns,tx,ty,tz,qw,qx,qy,qz"


@dataclass
class PoseSample:
    """A discrete trajectory sample: timestamp (ns), translation, rotation."""

    t: int
    translation: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        self.t = int(self.t)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        nrm = np.linalg.norm(self.rotation)
        if abs(nrm - 1.0) > 1e-6:
            raise DataError(f"pose sample at t={self.t} has non-unit quaternion")
        self.rotation = self.rotation / nrm

    def pose(self) -> Pose:
        return Pose(rotation=self.rotation, translation=self.translation)


def _prepare(samples: list[PoseSample]):
    if len(samples) < 2:
        raise DataError("need at least 2 pose samples")
    times = np.array([s.t for s in samples], dtype=np.int64)
    if np.any(np.diff(times) <= 0):
        idx = int(np.argmax(np.diff(times) <= 0)) + 1
        raise DataError(f"pose timestamps must strictly increase (index {idx})")
    trans = np.stack([s.translation for s in samples])
    quats = np.stack([s.rotation for s in samples])
    # Hemisphere alignment: keep consecutive dot products non-negative so
    # interpolation never walks the long way around the double cover.
    for i in range(1, len(quats)):
        if float(np.dot(quats[i - 1], quats[i])) < 0.0:
            quats[i] = -quats[i]
    return times, trans, quats


def _squad_inner_controls(quats: np.ndarray) -> np.ndarray:
    n = len(quats)
    inner = quats.copy()
    for i in range(1, n - 1):
        q_inv = quat_conjugate(quats[i])
        a = quat_log(quat_multiply(q_inv, quats[i + 1]))
        b = quat_log(quat_multiply(q_inv, quats[i - 1]))
        inner[i] = quat_multiply(quats[i], quat_exp(-(a + b) / 4.0))
    return inner


class PoseSpline:
    """Fitted trajectory; immutable after construction, queries are pure."""

    def __init__(self, times_ns, translations, quats):
        self.knot_times = np.asarray(times_ns, dtype=np.int64)
        self.knot_translations = np.asarray(translations, dtype=np.float64)
        self.knot_quats = np.asarray(quats, dtype=np.float64)
        # Relative seconds keep the spline solve well conditioned and make
        # the trajectory exactly equivariant to shifting all timestamps.
        self._t0 = int(self.knot_times[0])
        self._tsec = (self.knot_times - self._t0) * 1e-9
        self._trans_spline = CubicSpline(self._tsec, self.knot_translations, axis=0, bc_type="natural")
        self._inner = _squad_inner_controls(self.knot_quats)

    @property
    def t_start(self) -> int:
        return int(self.knot_times[0])

    @property
    def t_end(self) -> int:
        return int(self.knot_times[-1])

    def _segment(self, t_ns: int) -> tuple[int, float]:
        if t_ns < self.knot_times[0] or t_ns > self.knot_times[-1]:
            raise DataError(
                f"query t={t_ns} outside tracked interval "
                f"[{self.knot_times[0]}, {self.knot_times[-1]}]"
            )
        i = int(np.searchsorted(self.knot_times, t_ns, side="right")) - 1
        i = min(i, len(self.knot_times) - 2)
        h = float(self.knot_times[i + 1] - self.knot_times[i])
        u = float(t_ns - self.knot_times[i]) / h
        return i, u

    def rotation_at(self, t_ns: int) -> np.ndarray:
        i, u = self._segment(int(t_ns))
        if u == 0.0:
            return self.knot_quats[i].copy()
        if u == 1.0:
            return self.knot_quats[i + 1].copy()
        outer = quat_slerp(self.knot_quats[i], self.knot_quats[i + 1], u)
        inner = quat_slerp(self._inner[i], self._inner[i + 1], u)
        return quat_normalize(quat_slerp(outer, inner, 2.0 * u * (1.0 - u)))

    def translation_at(self, t_ns: int) -> np.ndarray:
        i, _ = self._segment(int(t_ns))  # range check only
        del i
        return np.asarray(self._trans_spline((int(t_ns) - self._t0) * 1e-9))


def fit_spline(samples: list[PoseSample]) -> PoseSpline:
    """Fit natural cubic translation + squad rotation through the samples."""
    times, trans, quats = _prepare(samples)
    return PoseSpline(times, trans, quats)


def pose_at(spline: PoseSpline, t_ns: int) -> Pose:
    """Interpolated world-from-camera pose; exact at knot times."""
    return Pose(rotation=spline.rotation_at(t_ns), translation=spline.translation_at(t_ns))


def linear_pose_at(samples: list[PoseSample], t_ns: int) -> Pose:
    """Ablation baseline: piecewise-linear translation + slerp rotation."""
    times, trans, quats = _prepare(samples)
    t_ns = int(t_ns)
    if t_ns < times[0] or t_ns > times[-1]:
        raise DataError(f"query t={t_ns} outside [{times[0]}, {times[-1]}]")
    i = min(int(np.searchsorted(times, t_ns, side="right")) - 1, len(times) - 2)
    u = float(t_ns - times[i]) / float(times[i + 1] - times[i])
    translation = (1.0 - u) * trans[i] + u * trans[i + 1]
    rotation = quat_normalize(quat_slerp(quats[i], quats[i + 1], u))
    return Pose(rotation=rotation, translation=translation)


def read_poses(path) -> list[PoseSample]:
    """Read `t_ns,tx,ty,tz,qw,qx,qy,qz` pose CSV (comment lines ignored)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"pose file not found: {path}")
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if lineno == 1 and not _is_number(parts[0]):
                continue  # optional non-comment header
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            samples.append(
                PoseSample(t=int(vals[0]), translation=vals[1:4], rotation=vals[4:8])
            )
    if not samples:
        raise DataError(f"{path}: no pose samples")
    return samples


def write_poses(samples: list[PoseSample], path) -> None:
    lines = [POSE_CSV_HEADER]
    for s in samples:
        tx, ty, tz = s.translation
        qw, qx, qy, qz = s.rotation
        lines.append(
            f"{s.t},{tx!r},{ty!r},{tz!r},{qw!r},{qx!r},{qy!r},{qz!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False
