"""Differentiable tile rasterizer plus remosaic / log-difference assembly.

Forward: project the cloud, bin splats into 16x16 pixel tiles sorted
front-to-back by camera depth (ties broken on Gaussian index), composite
per pixel, blend the remaining transmittance with the background.

Backward: replay per pixel, accumulate per-(tile, splat) gradients in the
kernels, reduce them in fixed pair order, then chain screen-space
gradients through projection to every 3D parameter analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, sh
from .camera import Camera
from .errors import DataError
from .geometry import Pose
from .scene import GaussianCloud, ProjectionCache, project_cloud

LOG_EPS = 1e-5  # additive floor under the training-path logarithm

TILE = kernels.TILE


@dataclass
class RenderedImage:
    """Linear-intensity render and the per-pixel final transmittance."""

    pixels: np.ndarray         # (H, W, 3), >= 0
    transmittance: np.ndarray  # (H, W) in [0, 1]


@dataclass
class RenderGraphState:
    """Everything the backward pass needs to replay one rasterization."""

    cache: ProjectionCache
    pair_splat: np.ndarray   # (P,) splat index per (tile, splat) instance
    tile_starts: np.ndarray  # (n_tiles + 1,) slice bounds into pair_splat
    n_tiles_x: int
    image: np.ndarray        # (H, W, 3) forward output
    transmittance: np.ndarray
    n_contrib: np.ndarray    # (H, W) splats composited per pixel

    def replay(self) -> np.ndarray:
        """Re-run the forward kernel from stored state (bit-identical)."""
        cam = self.cache.cam
        image = np.zeros((cam.height, cam.width, 3))
        transmittance = np.zeros((cam.height, cam.width))
        n_contrib = np.zeros((cam.height, cam.width), dtype=np.int32)
        kernels.composite_forward(
            self.pair_splat, self.tile_starts, self.cache.mean2d,
            _conic_triplets(self.cache), self.cache.colors, self.cache.alphas,
            self.cache.background, cam.width, cam.height,
            self.n_tiles_x, image, transmittance, n_contrib,
        )
        return image


@dataclass
class CloudGradients:
    """Per-Gaussian parameter gradients from one or more rasterizations."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    mean2d_pixels: np.ndarray  # screen-space gradients, kept for densification

    @classmethod
    def zeros(cls, cloud: GaussianCloud) -> "CloudGradients":
        n = len(cloud)
        return cls(
            means=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            opacity_logits=np.zeros(n),
            sh_coeffs=np.zeros_like(cloud.sh_coeffs),
            mean2d_pixels=np.zeros((n, 2)),
        )

    def add_(self, other: "CloudGradients") -> "CloudGradients":
        self.means += other.means
        self.log_scales += other.log_scales
        self.rotations += other.rotations
        self.opacity_logits += other.opacity_logits
        self.sh_coeffs += other.sh_coeffs
        self.mean2d_pixels += other.mean2d_pixels
        return self


def _conic_triplets(cache: ProjectionCache) -> np.ndarray:
    tri = np.empty((len(cache.conic), 3))
    tri[:, 0] = cache.conic[:, 0, 0]
    tri[:, 1] = cache.conic[:, 0, 1]
    tri[:, 2] = cache.conic[:, 1, 1]
    return np.ascontiguousarray(tri)


def _build_pairs(cache: ProjectionCache, cam: Camera):
    """Duplicate visible splats into per-tile instances sorted front-to-back."""
    n_tiles_x = (cam.width + TILE - 1) // TILE
    n_tiles_y = (cam.height + TILE - 1) // TILE
    n_tiles = n_tiles_x * n_tiles_y
    vis = np.flatnonzero(cache.visible)
    if vis.size == 0:
        return (np.zeros(0, dtype=np.int64),
                np.zeros(n_tiles + 1, dtype=np.int64), n_tiles_x)
    mx = cache.mean2d[vis, 0]
    my = cache.mean2d[vis, 1]
    r = cache.radius[vis]
    tx0 = np.clip(np.floor((mx - r) / TILE).astype(np.int64), 0, n_tiles_x - 1)
    tx1 = np.clip(np.floor((mx + r) / TILE).astype(np.int64), 0, n_tiles_x - 1)
    ty0 = np.clip(np.floor((my - r) / TILE).astype(np.int64), 0, n_tiles_y - 1)
    ty1 = np.clip(np.floor((my + r) / TILE).astype(np.int64), 0, n_tiles_y - 1)
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    total = int(counts.sum())
    owner = np.repeat(np.arange(vis.size), counts)
    first = np.repeat(np.cumsum(counts) - counts, counts)
    within = np.arange(total) - first
    wx = (tx1 - tx0 + 1)[owner]
    tile = (ty0[owner] + within // wx) * n_tiles_x + tx0[owner] + within % wx
    splat = vis[owner]
    order = np.lexsort((splat, cache.depth[splat], tile))
    tile = tile[order]
    splat = splat[order]
    tile_starts = np.searchsorted(tile, np.arange(n_tiles + 1)).astype(np.int64)
    return np.ascontiguousarray(splat), tile_starts, n_tiles_x


def rasterize(cloud: GaussianCloud, cam: Camera, view: Pose,
              near: float = 0.01, active_degree: int | None = None):
    """Render the cloud; returns (RenderedImage, RenderGraphState)."""
    cache = project_cloud(cloud, view, cam, near=near, active_degree=active_degree)
    pair_splat, tile_starts, n_tiles_x = _build_pairs(cache, cam)
    image = np.zeros((cam.height, cam.width, 3))
    transmittance = np.zeros((cam.height, cam.width))
    n_contrib = np.zeros((cam.height, cam.width), dtype=np.int32)
    kernels.composite_forward(
        pair_splat, tile_starts, cache.mean2d, _conic_triplets(cache),
        cache.colors, cache.alphas, cloud.background, cam.width, cam.height,
        n_tiles_x, image, transmittance, n_contrib,
    )
    state = RenderGraphState(
        cache=cache, pair_splat=pair_splat, tile_starts=tile_starts,
        n_tiles_x=n_tiles_x, image=image, transmittance=transmittance,
        n_contrib=n_contrib,
    )
    return RenderedImage(pixels=image, transmittance=transmittance), state


def _quat_grad_from_matrix(grad_r: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Chain (N,3,3) rotation-matrix gradients to unit quaternions (w,x,y,z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = grad_r
    gw = 2.0 * (-g[:, 0, 1] * z + g[:, 0, 2] * y + g[:, 1, 0] * z
                - g[:, 1, 2] * x - g[:, 2, 0] * y + g[:, 2, 1] * x)
    gx = 2.0 * (g[:, 0, 1] * y + g[:, 0, 2] * z + g[:, 1, 0] * y
                - 2.0 * g[:, 1, 1] * x - g[:, 1, 2] * w + g[:, 2, 0] * z
                + g[:, 2, 1] * w - 2.0 * g[:, 2, 2] * x)
    gy = 2.0 * (-2.0 * g[:, 0, 0] * y + g[:, 0, 1] * x + g[:, 0, 2] * w
                + g[:, 1, 0] * x + g[:, 1, 2] * z - g[:, 2, 0] * w
                + g[:, 2, 1] * z - 2.0 * g[:, 2, 2] * y)
    gz = 2.0 * (-2.0 * g[:, 0, 0] * z - g[:, 0, 1] * w + g[:, 0, 2] * x
                + g[:, 1, 0] * w - 2.0 * g[:, 1, 1] * z + g[:, 1, 2] * y
                + g[:, 2, 0] * x + g[:, 2, 1] * y)
    return np.stack([gw, gx, gy, gz], axis=1)


def rasterize_backward(state: RenderGraphState, grad_pixels: np.ndarray) -> CloudGradients:
    """Exact gradients of the rendered image w.r.t. all cloud parameters."""
    cache = state.cache
    cam = cache.cam
    if grad_pixels.shape != state.image.shape:
        raise DataError(
            f"gradient shape {grad_pixels.shape} != image shape {state.image.shape}"
        )
    n = len(cache.mean2d)
    n_pairs = len(state.pair_splat)
    pg_mean2d = np.zeros((n_pairs, 2))
    pg_conic = np.zeros((n_pairs, 3))
    pg_color = np.zeros((n_pairs, 3))
    pg_alpha = np.zeros(n_pairs)
    if n_pairs:
        kernels.composite_backward(
            state.pair_splat, state.tile_starts, cache.mean2d,
            _conic_triplets(cache), cache.colors, cache.alphas,
            cam.width, cam.height, state.n_tiles_x, state.image,
            np.ascontiguousarray(grad_pixels, dtype=np.float64),
            pg_mean2d, pg_conic, pg_color, pg_alpha,
        )

    # Deterministic reduction: bincount walks pairs in sorted order.
    def reduce(col):
        return np.bincount(state.pair_splat, weights=col, minlength=n)

    g_mean2d = np.stack([reduce(pg_mean2d[:, 0]), reduce(pg_mean2d[:, 1])], axis=1)
    g_conic_tri = np.stack([reduce(pg_conic[:, k]) for k in range(3)], axis=1)
    g_color = np.stack([reduce(pg_color[:, k]) for k in range(3)], axis=1)
    g_alpha = reduce(pg_alpha)

    # conic = inv(cov2d): dL/dcov = -conic @ dL/dconic @ conic.
    g_conic = np.empty((n, 2, 2))
    g_conic[:, 0, 0] = g_conic_tri[:, 0]
    g_conic[:, 0, 1] = 0.5 * g_conic_tri[:, 1]
    g_conic[:, 1, 0] = 0.5 * g_conic_tri[:, 1]
    g_conic[:, 1, 1] = g_conic_tri[:, 2]
    g_cov2d = -cache.conic @ g_conic @ cache.conic

    jac = cache.jac
    vcov = cache.cov3d_view
    # cov2d = J V J^T (+const): dL/dJ = 2 G J V, dL/dV = J^T G J.
    g_jac = 2.0 * g_cov2d @ jac @ vcov
    g_vcov = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac

    # V = R Sigma R^T with fixed world-to-camera R.
    r = cache.r_wc.T
    g_sigma = np.einsum("ji,njk,kl->nil", r, g_vcov, r)

    # Sigma = L L^T, L = Rq diag(s).
    l = cache.rot_mats * cache.scales[:, None, :]
    g_l = 2.0 * g_sigma @ l
    g_scales = np.einsum("nik,nik->nk", g_l, cache.rot_mats)
    g_log_scales = g_scales * cache.scales
    g_rotmat = g_l * cache.scales[:, None, :]
    g_unit_quat = _quat_grad_from_matrix(g_rotmat, cache.unit_quats)
    # Through normalization q_unit = q / |q|.
    dot = np.einsum("nk,nk->n", cache.unit_quats, g_unit_quat)
    g_quat = (g_unit_quat - cache.unit_quats * dot[:, None]) / cache.quat_norms[:, None]

    # Camera-frame position gradients: via the projected mean and via J(t).
    tx, ty = cache.t_view[:, 0], cache.t_view[:, 1]
    tz = np.where(cache.visible, cache.depth, 1.0)
    g_t = np.einsum("nij,ni->nj", jac, g_mean2d)
    inv_z2 = 1.0 / (tz * tz)
    g_t[:, 0] += g_jac[:, 0, 2] * (-cam.fx * inv_z2)
    g_t[:, 1] += g_jac[:, 1, 2] * (-cam.fy * inv_z2)
    g_t[:, 2] += (g_jac[:, 0, 0] * (-cam.fx * inv_z2)
                  + g_jac[:, 0, 2] * (2.0 * cam.fx * tx * inv_z2 / tz)
                  + g_jac[:, 1, 1] * (-cam.fy * inv_z2)
                  + g_jac[:, 1, 2] * (2.0 * cam.fy * ty * inv_z2 / tz))
    g_means = g_t @ cache.r_wc.T  # t = R x + t0 with R = r_wc^T

    # Color gradients: SH coefficients plus the view-direction path (the
    # direction depends on the mean, so means pick up a color term too).
    g_color = np.where(cache.color_clamped, 0.0, g_color)
    k = cache.basis.shape[1]
    coeffs_active = cache.sh_coeffs[:, :k, :]
    g_sh = np.zeros_like(cache.sh_coeffs)
    g_sh[:, :k, :] = cache.basis[:, :, None] * g_color[:, None, :]
    basis_grad = sh.sh_basis_gradient(cache.active_degree, cache.dirs)
    g_dir = np.einsum("nkc,nc,nkd->nd", coeffs_active, g_color, basis_grad)
    # dir = u / |u|: project out the radial component of the gradient.
    radial = np.einsum("nd,nd->n", cache.dirs, g_dir)
    g_means += (g_dir - cache.dirs * radial[:, None]) \
        / np.maximum(cache.dir_norms, 1e-12)[:, None]

    g_opacity = g_alpha * cache.alphas * (1.0 - cache.alphas)

    return CloudGradients(
        means=g_means,
        log_scales=g_log_scales,
        rotations=g_quat,
        opacity_logits=g_opacity,
        sh_coeffs=g_sh,
        mean2d_pixels=g_mean2d,
    )


def remosaic(image: np.ndarray, cam: Camera) -> np.ndarray:
    """Keep, per pixel, the channel its Bayer cell observes (H, W, 3) -> (H, W)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"remosaic expects (H, W, 3), got {image.shape}")
    chan = cam.channel_map()
    return np.take_along_axis(image, chan[..., None].astype(np.int64), axis=2)[..., 0]


def remosaic_backward(grad_mono: np.ndarray, cam: Camera) -> np.ndarray:
    grad = np.zeros(grad_mono.shape + (3,))
    chan = cam.channel_map().astype(np.int64)
    np.put_along_axis(grad, chan[..., None], grad_mono[..., None], axis=2)
    return grad


def log_image(image: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    """Elementwise ln(max(value, 0) + eps)."""
    return np.log(np.maximum(image, 0.0) + eps)


def log_image_backward(image: np.ndarray, grad: np.ndarray,
                       eps: float = LOG_EPS) -> np.ndarray:
    return np.where(image >= 0.0, grad / (np.maximum(image, 0.0) + eps), 0.0)


@dataclass
class LogDiffRender:
    """Predicted log-difference image with retained per-view render state."""

    values: np.ndarray  # (H, W) log-domain difference, end minus start
    state_start: RenderGraphState
    state_end: RenderGraphState
    mono_start: np.ndarray
    mono_end: np.ndarray
    eps: float


def render_log_diff(cloud: GaussianCloud, cam: Camera, pose_start: Pose,
                    pose_end: Pose, near: float = 0.01,
                    active_degree: int | None = None,
                    eps: float = LOG_EPS) -> LogDiffRender:
    """Predicted accumulated-change image between two trajectory poses."""
    img1, st1 = rasterize(cloud, cam, pose_start, near=near, active_degree=active_degree)
    img2, st2 = rasterize(cloud, cam, pose_end, near=near, active_degree=active_degree)
    mono1 = remosaic(img1.pixels, cam)
    mono2 = remosaic(img2.pixels, cam)
    values = log_image(mono2, eps) - log_image(mono1, eps)
    return LogDiffRender(values=values, state_start=st1, state_end=st2,
                         mono_start=mono1, mono_end=mono2, eps=eps)


def render_log_diff_backward(render: LogDiffRender, grad_values: np.ndarray,
                             cam: Camera) -> CloudGradients:
    """Chain a gradient on the log-difference image back to the cloud."""
    g_mono_end = log_image_backward(render.mono_end, grad_values, render.eps)
    g_mono_start = log_image_backward(render.mono_start, -grad_values, render.eps)
    g_end = rasterize_backward(render.state_end, remosaic_backward(g_mono_end, cam))
    g_start = rasterize_backward(render.state_start, remosaic_backward(g_mono_start, cam))
    return g_end.add_(g_start)
