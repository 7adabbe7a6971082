"""Pinhole camera with radial-tangential distortion and Bayer layout.

Rendering is always done through the undistorted pinhole model; the
distortion coefficients only enter when building the pixel remap that
undistorts raw events during accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

BAYER_PATTERNS = ("rggb", "bggr", "grbg", "gbrg", "mono")
_CHANNEL_INDEX = {"r": 0, "g": 1, "b": 2}


@dataclass
class Camera:
    """Intrinsics, resolution, distortion (k1, k2, p1, p2), Bayer pattern."""

    fx: float
    fy: float
    cx: float
    cy: float
    resolution: tuple[int, int]
    distortion: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    bayer_pattern: str = "rggb"

    def __post_init__(self):
        w, h = self.resolution
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be > 0, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < w and 0 <= self.cy < h):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {w}x{h} frame"
            )
        if self.bayer_pattern not in BAYER_PATTERNS:
            raise ConfigError(f"unknown bayer pattern {self.bayer_pattern!r}")
        if len(self.distortion) != 4:
            raise ConfigError("distortion must be (k1, k2, p1, p2)")
        self.distortion = tuple(float(d) for d in self.distortion)

    @property
    def width(self) -> int:
        return int(self.resolution[0])

    @property
    def height(self) -> int:
        return int(self.resolution[1])

    @property
    def is_mono(self) -> bool:
        return self.bayer_pattern == "mono"

    def channel_map(self) -> np.ndarray:
        """(H, W) int array of the color channel each sensor pixel observes.

        For mono sensors every pixel maps to channel 0.
        """
        h, w = self.height, self.width
        if self.is_mono:
            return np.zeros((h, w), dtype=np.int8)
        chans = [_CHANNEL_INDEX[c] for c in self.bayer_pattern]
        tile = np.array([[chans[0], chans[1]], [chans[2], chans[3]]], dtype=np.int8)
        reps = (h + 1) // 2, (w + 1) // 2
        return np.tile(tile, reps)[:h, :w]


def distort_normalized(xu: np.ndarray, yu: np.ndarray, dist) -> tuple[np.ndarray, np.ndarray]:
    """Apply the radial-tangential model to undistorted normalized coords."""
    k1, k2, p1, p2 = dist
    r2 = xu * xu + yu * yu
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = xu * radial + 2.0 * p1 * xu * yu + p2 * (r2 + 2.0 * xu * xu)
    yd = yu * radial + p1 * (r2 + 2.0 * yu * yu) + 2.0 * p2 * xu * yu
    return xd, yd


def undistort_normalized(xd, yd, dist, iterations: int = 10):
    """Invert the distortion model by fixed-point iteration."""
    xu = np.array(xd, dtype=np.float64, copy=True)
    yu = np.array(yd, dtype=np.float64, copy=True)
    k1, k2, p1, p2 = dist
    for _ in range(iterations):
        r2 = xu * xu + yu * yu
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dx = 2.0 * p1 * xu * yu + p2 * (r2 + 2.0 * xu * xu)
        dy = p1 * (r2 + 2.0 * yu * yu) + 2.0 * p2 * xu * yu
        xu = (xd - dx) / radial
        yu = (yd - dy) / radial
    return xu, yu


def build_undistort_map(cam: Camera) -> np.ndarray:
    """Nearest-pixel event remap: raw sensor pixel -> undistorted pixel.

    Returns an int32 (H, W, 2) array holding the target (x, y) for each raw
    pixel; entries are (-1, -1) where the undistorted position leaves the
    frame (such events are dropped by accumulation, not clamped).
    """
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w]
    xd = (xs - cam.cx) / cam.fx
    yd = (ys - cam.cy) / cam.fy
    xu, yu = undistort_normalized(xd, yd, cam.distortion)
    px = np.rint(xu * cam.fx + cam.cx).astype(np.int64)
    py = np.rint(yu * cam.fy + cam.cy).astype(np.int64)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    remap = np.full((h, w, 2), -1, dtype=np.int32)
    remap[inside, 0] = px[inside]
    remap[inside, 1] = py[inside]
    return remap
