"""SSIM (with analytic gradients) and PSNR.

SSIM uses an 11x11 Gaussian window, sigma 1.5, zero-padded 'same'
filtering, C1 = (0.01 r)^2 and C2 = (0.03 r)^2 where r is the data range.
The backward pass differentiates the mean of the SSIM map with respect to
both inputs; training needs the first, threshold co-optimization the
second.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DataError

PSNR_CAP_DB = 99.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if size % 2 != 1 or size < 1:
        raise DataError(f"window size must be odd and positive, got {size}")
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filt(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = correlate1d(img, k, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, k, axis=1, mode="constant", cval=0.0)


@dataclass
class SsimCache:
    a: np.ndarray
    b: np.ndarray
    kernel: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    var_a: np.ndarray
    var_b: np.ndarray
    cov_ab: np.ndarray
    c1: float
    c2: float
    ssim_map: np.ndarray


def resolve_data_range(target: np.ndarray) -> float:
    """Dynamic range used for the SSIM constants: max |target|, min 1e-8."""
    r = float(np.abs(target).max()) if target.size else 0.0
    return max(r, 1e-8)


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11,
             sigma: float = 1.5, data_range: float | None = None) -> SsimCache:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    if data_range is None:
        data_range = resolve_data_range(b)
    k = gaussian_window(window, sigma)
    mu_a = _filt(a, k)
    mu_b = _filt(b, k)
    var_a = _filt(a * a, k) - mu_a * mu_a
    var_b = _filt(b * b, k) - mu_b * mu_b
    cov_ab = _filt(a * b, k) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2.0 * cov_ab + c2) / (var_a + var_b + c2)
    return SsimCache(a=a, b=b, kernel=k, mu_a=mu_a, mu_b=mu_b, var_a=var_a,
                     var_b=var_b, cov_ab=cov_ab, c1=c1, c2=c2,
                     ssim_map=lum * cs)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11,
         sigma: float = 1.5, data_range: float | None = None) -> float:
    return float(ssim_map(a, b, window, sigma, data_range).ssim_map.mean())


def ssim_backward(cache: SsimCache, grad_map: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_map * ssim_map) w.r.t. both input images."""
    a1 = 2.0 * cache.mu_a * cache.mu_b + cache.c1
    a2 = 2.0 * cache.cov_ab + cache.c2
    b1 = cache.mu_a**2 + cache.mu_b**2 + cache.c1
    b2 = cache.var_a + cache.var_b + cache.c2
    inv_b1b2 = 1.0 / (b1 * b2)
    d_a1 = grad_map * a2 * inv_b1b2
    d_a2 = grad_map * a1 * inv_b1b2
    d_b1 = -grad_map * a1 * a2 * inv_b1b2 / b1
    d_b2 = -grad_map * a1 * a2 * inv_b1b2 / b2

    d_mu_a = 2.0 * (d_a1 * cache.mu_b + d_b1 * cache.mu_a)
    d_mu_b = 2.0 * (d_a1 * cache.mu_a + d_b1 * cache.mu_b)
    d_var_a = d_b2
    d_var_b = d_b2
    d_cov = 2.0 * d_a2

    k = cache.kernel
    # mu, var, cov are windowed stats; each scatters back through the
    # (symmetric) window, with the centered-value product rule terms.
    grad_a = (_filt(d_mu_a, k)
              + 2.0 * cache.a * _filt(d_var_a, k)
              - 2.0 * _filt(d_var_a * cache.mu_a, k)
              + cache.b * _filt(d_cov, k)
              - _filt(d_cov * cache.mu_b, k))
    grad_b = (_filt(d_mu_b, k)
              + 2.0 * cache.b * _filt(d_var_b, k)
              - 2.0 * _filt(d_var_b * cache.mu_b, k)
              + cache.a * _filt(d_cov, k)
              - _filt(d_cov * cache.mu_a, k))
    return grad_a, grad_b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 99 dB for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)
