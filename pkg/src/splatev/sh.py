"""Real spherical harmonics basis for view-dependent color, degrees 0-3.

Basis ordering and constants follow the usual splatting convention; a
color channel is coeffs . basis + 0.5, clamped at zero from below. The
direction gradient is needed because splat means move the viewing
direction during optimization.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

MAX_DEGREE = 3


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values for unit directions; dirs (N, 3) -> (N, (degree+1)^2)."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"sh degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    out = np.empty((n, n_coeffs(degree)), dtype=np.float64)
    out[:, 0] = SH_C0
    if degree == 0:
        return out
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    if degree == 1:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = SH_C2[0] * xy
    out[:, 5] = SH_C2[1] * yz
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * xz
    out[:, 8] = SH_C2[4] * (xx - yy)
    if degree == 2:
        return out
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * xy * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_gradient(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d basis / d direction, shape (N, (degree+1)^2, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    grad = np.zeros((n, n_coeffs(degree), 3), dtype=np.float64)
    if degree == 0:
        return grad
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    grad[:, 1, 1] = -SH_C1
    grad[:, 2, 2] = SH_C1
    grad[:, 3, 0] = -SH_C1
    if degree == 1:
        return grad
    grad[:, 4, 0] = SH_C2[0] * y
    grad[:, 4, 1] = SH_C2[0] * x
    grad[:, 5, 1] = SH_C2[1] * z
    grad[:, 5, 2] = SH_C2[1] * y
    grad[:, 6, 0] = SH_C2[2] * (-2.0 * x)
    grad[:, 6, 1] = SH_C2[2] * (-2.0 * y)
    grad[:, 6, 2] = SH_C2[2] * (4.0 * z)
    grad[:, 7, 0] = SH_C2[3] * z
    grad[:, 7, 2] = SH_C2[3] * x
    grad[:, 8, 0] = SH_C2[4] * (2.0 * x)
    grad[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree == 2:
        return grad
    xx, yy, zz = x * x, y * y, z * z
    grad[:, 9, 0] = SH_C3[0] * 6.0 * x * y
    grad[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
    grad[:, 10, 0] = SH_C3[1] * y * z
    grad[:, 10, 1] = SH_C3[1] * x * z
    grad[:, 10, 2] = SH_C3[1] * x * y
    grad[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
    grad[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
    grad[:, 11, 2] = SH_C3[2] * (8.0 * y * z)
    grad[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
    grad[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
    grad[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    grad[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
    grad[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
    grad[:, 13, 2] = SH_C3[4] * (8.0 * x * z)
    grad[:, 14, 0] = SH_C3[5] * (2.0 * x * z)
    grad[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
    grad[:, 14, 2] = SH_C3[5] * (xx - yy)
    grad[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
    grad[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return grad
