"""Optimizable Gaussian scene: parameters, activations, projection, init.

The cloud is stored structure-of-arrays for speed; Gaussian3D is the
per-primitive record used at construction and in tests. Scales live in
log space and opacities in logit space so that activated values are
positive / in (0, 1) by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import sh
from .camera import Camera
from .errors import DataError
from .geometry import Pose, quat_normalize, quat_to_matrix

# Fixed low-pass added to every projected 2D covariance (pixels^2); keeps
# footprints at least ~one pixel wide so nothing falls between samples.
COV2D_LOWPASS = 0.3

SCALE_FLOOR = 1e-4  # meters; guards degenerate point-density estimates


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass
class Gaussian3D:
    """One splat: mean, log scales, rotation quaternion, opacity logit, SH."""

    mean: np.ndarray
    log_scales: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # ((degree+1)^2, 3)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.sh_coeffs = np.atleast_2d(np.asarray(self.sh_coeffs, dtype=np.float64))


class GaussianCloud:
    """Structure-of-arrays Gaussian collection plus fixed background color."""

    def __init__(self, means, log_scales, rotations, opacity_logits, sh_coeffs,
                 sh_degree: int, background=(1.0, 1.0, 1.0)):
        self.means = np.ascontiguousarray(means, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64)
        self.sh_coeffs = np.ascontiguousarray(sh_coeffs, dtype=np.float64)
        self.sh_degree = int(sh_degree)
        self.background = np.asarray(background, dtype=np.float64).reshape(3)
        n = len(self.means)
        k = sh.n_coeffs(self.sh_degree)
        if self.sh_coeffs.shape != (n, k, 3):
            raise DataError(
                f"sh_coeffs shape {self.sh_coeffs.shape} != ({n}, {k}, 3)"
            )
        if not (self.background.min() >= 0.0 and self.background.max() <= 1.0):
            raise DataError("background intensities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[i],
            log_scales=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i],
        )

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int, background=(1.0, 1.0, 1.0)):
        gaussians = list(gaussians)
        if not gaussians:
            raise DataError("cannot build an empty cloud")
        k = sh.n_coeffs(sh_degree)
        coeffs = np.zeros((len(gaussians), k, 3))
        for i, g in enumerate(gaussians):
            kg = min(k, g.sh_coeffs.shape[0])
            coeffs[i, :kg] = g.sh_coeffs[:kg]
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            log_scales=np.stack([g.log_scales for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh_coeffs=coeffs,
            sh_degree=sh_degree,
            background=background,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.opacity_logits.copy(), self.sh_coeffs.copy(),
            self.sh_degree, self.background.copy(),
        )

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)


def build_covariance(g: Gaussian3D) -> np.ndarray:
    """World-space 3x3 covariance R S S^T R^T of a single splat."""
    return build_covariances(g.rotation[None], g.log_scales[None])[0]


def build_covariances(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    rot = quat_to_matrix(quat_normalize(rotations))
    l = rot * np.exp(log_scales)[..., None, :]
    return l @ np.swapaxes(l, -1, -2)


@dataclass
class ProjectedSplat:
    """Screen-space footprint of one Gaussian under a given view."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float


@dataclass
class ProjectionCache:
    """Batched projection of a cloud; keeps every intermediate the backward
    pass needs to chain screen-space gradients to the 3D parameters."""

    cam: Camera
    view: Pose
    active_degree: int
    r_wc: np.ndarray           # world-from-camera rotation matrix
    t_view: np.ndarray         # (N, 3) camera-frame means
    unit_quats: np.ndarray     # (N, 4) normalized rotations
    quat_norms: np.ndarray     # (N,) raw rotation norms
    rot_mats: np.ndarray       # (N, 3, 3)
    scales: np.ndarray         # (N, 3) activated
    cov3d_view: np.ndarray     # (N, 3, 3) covariance in camera frame
    jac: np.ndarray            # (N, 2, 3) projection Jacobians
    mean2d: np.ndarray         # (N, 2)
    cov2d: np.ndarray          # (N, 2, 2)
    conic: np.ndarray          # (N, 2, 2)
    depth: np.ndarray          # (N,)
    radius: np.ndarray         # (N,) 3-sigma pixel radius, 0 when culled
    visible: np.ndarray        # (N,) bool
    dirs: np.ndarray           # (N, 3) unit view directions
    dir_norms: np.ndarray      # (N,)
    basis: np.ndarray          # (N, K_active)
    colors: np.ndarray         # (N, 3) clamped
    color_clamped: np.ndarray  # (N, 3) bool, True where clamped at 0
    alphas: np.ndarray         # (N,)
    sh_coeffs: np.ndarray      # (N, K_full, 3) reference to the cloud's coeffs
    background: np.ndarray     # (3,) copied from the cloud


def project_cloud(cloud: GaussianCloud, view: Pose, cam: Camera,
                  near: float = 0.01, active_degree: int | None = None) -> ProjectionCache:
    """Project every Gaussian; visibility combines the near plane with a
    3-sigma footprint test against the frame."""
    if active_degree is None:
        active_degree = cloud.sh_degree
    active_degree = min(active_degree, cloud.sh_degree)
    n = len(cloud)
    r_wc = quat_to_matrix(view.rotation)
    r = r_wc.T
    t_cam = -r @ view.translation

    t_view = cloud.means @ r.T + t_cam
    depth = t_view[:, 2].copy()
    in_front = depth > near

    quat_norms = np.linalg.norm(cloud.rotations, axis=1)
    unit_quats = cloud.rotations / quat_norms[:, None]
    rot_mats = quat_to_matrix(unit_quats)
    scales = np.exp(cloud.log_scales)
    l = rot_mats * scales[:, None, :]
    cov3d = l @ np.swapaxes(l, 1, 2)
    cov3d_view = np.einsum("ij,njk,lk->nil", r, cov3d, r)

    tz = np.where(in_front, depth, 1.0)  # placeholder depth for culled rows
    tx, ty = t_view[:, 0], t_view[:, 1]
    jac = np.zeros((n, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * tx / (tz * tz)
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * ty / (tz * tz)

    cov2d = jac @ cov3d_view @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += COV2D_LOWPASS
    cov2d[:, 1, 1] += COV2D_LOWPASS

    mean2d = np.stack(
        [cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy], axis=1
    )

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(np.maximum(lam_max, 0.0)))

    on_frame = (
        (mean2d[:, 0] + radius >= 0.0)
        & (mean2d[:, 0] - radius <= cam.width - 1)
        & (mean2d[:, 1] + radius >= 0.0)
        & (mean2d[:, 1] - radius <= cam.height - 1)
    )
    visible = in_front & on_frame & (det > 0.0)
    radius = np.where(visible, radius, 0.0)

    inv_det = np.where(det != 0.0, 1.0 / np.where(det != 0.0, det, 1.0), 0.0)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c * inv_det
    conic[:, 0, 1] = -b * inv_det
    conic[:, 1, 0] = -b * inv_det
    conic[:, 1, 1] = a * inv_det

    diff = cloud.means - view.camera_center()
    dir_norms = np.linalg.norm(diff, axis=1)
    safe = np.maximum(dir_norms, 1e-12)
    dirs = diff / safe[:, None]
    basis = sh.sh_basis(active_degree, dirs)
    k = basis.shape[1]
    raw = np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs[:, :k, :]) + 0.5
    color_clamped = raw < 0.0
    colors = np.maximum(raw, 0.0)

    alphas = sigmoid(cloud.opacity_logits)

    return ProjectionCache(
        cam=cam, view=view, active_degree=active_degree, r_wc=r_wc,
        t_view=t_view, unit_quats=unit_quats, quat_norms=quat_norms,
        rot_mats=rot_mats, scales=scales, cov3d_view=cov3d_view, jac=jac,
        mean2d=mean2d, cov2d=cov2d, conic=conic, depth=depth, radius=radius,
        visible=visible, dirs=dirs, dir_norms=dir_norms, basis=basis,
        colors=colors, color_clamped=color_clamped, alphas=alphas,
        sh_coeffs=cloud.sh_coeffs, background=cloud.background.copy(),
    )


def project(g: Gaussian3D, view: Pose, cam: Camera, near: float = 0.01):
    """Project a single Gaussian; returns None when culled."""
    cloud = GaussianCloud.from_gaussians(
        [g], sh_degree=int(np.sqrt(g.sh_coeffs.shape[0])) - 1
    )
    cache = project_cloud(cloud, view, cam, near=near)
    if not cache.visible[0]:
        return None
    return ProjectedSplat(
        mean2d=cache.mean2d[0],
        cov2d=cache.cov2d[0],
        depth=float(cache.depth[0]),
        color=cache.colors[0],
        alpha=float(cache.alphas[0]),
    )


def sh_to_color(coeffs: np.ndarray, view_direction: np.ndarray) -> np.ndarray:
    """Evaluate SH color for one coefficient set and unit direction."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
    degree = int(np.sqrt(coeffs.shape[0])) - 1
    if sh.n_coeffs(degree) != coeffs.shape[0]:
        raise DataError(f"coefficient count {coeffs.shape[0]} is not a full degree")
    basis = sh.sh_basis(degree, np.asarray(view_direction, dtype=np.float64)[None])
    return np.maximum(basis[0] @ coeffs + 0.5, 0.0)


def empty_cloud(sh_degree: int = 0, background=(1.0, 1.0, 1.0)) -> GaussianCloud:
    """Zero-Gaussian cloud; renders as pure background."""
    k = sh.n_coeffs(sh_degree)
    return GaussianCloud(
        means=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
        rotations=np.zeros((0, 4)), opacity_logits=np.zeros(0),
        sh_coeffs=np.zeros((0, k, 3)), sh_degree=sh_degree, background=background,
    )


def init_random(n: int, bounds, rng, sh_degree: int = 2,
                background=(1.0, 1.0, 1.0)) -> GaussianCloud:
    """Uniform random cloud in an axis-aligned box; scales from the mean
    nearest-neighbor distance, opacity 0.1, mid-gray color."""
    if n <= 0:
        raise DataError(f"need at least one Gaussian, got n={n}")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if np.any(hi <= lo):
        raise DataError("bounds must satisfy min < max per axis")
    means = rng.uniform(lo, hi, size=(n, 3))
    if n > 1:
        dists, _ = cKDTree(means).query(means, k=2)
        d = max(float(dists[:, 1].mean()), SCALE_FLOOR)
    else:
        d = max(float((hi - lo).mean()) * 0.1, SCALE_FLOOR)
    log_scales = np.full((n, 3), np.log(d))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full(n, float(logit(0.1)))
    sh_coeffs = np.zeros((n, sh.n_coeffs(sh_degree), 3))
    return GaussianCloud(means, log_scales, rotations, opacity_logits,
                         sh_coeffs, sh_degree, background)


def init_from_points(points, colors=None, sh_degree: int = 2,
                     background=(1.0, 1.0, 1.0)) -> GaussianCloud:
    """One Gaussian per point; scale from the distance to the 3rd nearest
    neighbor (floored), DC color from the point color or mid-gray."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.size == 0:
        raise DataError("point list is empty")
    n = len(points)
    if n >= 4:
        dists, _ = cKDTree(points).query(points, k=4)
        d = dists[:, 3]
    elif n >= 2:
        dists, _ = cKDTree(points).query(points, k=2)
        d = dists[:, 1]
    else:
        d = np.array([1e-2])
    d = np.maximum(d, SCALE_FLOOR)
    log_scales = np.repeat(np.log(d)[:, None], 3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacity_logits = np.full(n, float(logit(0.1)))
    sh_coeffs = np.zeros((n, sh.n_coeffs(sh_degree), 3))
    if colors is not None:
        colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        if len(colors) != n:
            raise DataError(f"{len(colors)} colors for {n} points")
        sh_coeffs[:, 0, :] = (colors - 0.5) / sh.SH_C0
    return GaussianCloud(points.copy(), log_scales, rotations, opacity_logits,
                         sh_coeffs, sh_degree, background)


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read an ASCII PLY with x,y,z and optional red,green,blue properties.

    Returns (points, colors) with colors scaled to [0, 1] or None.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"point cloud not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        if fh.readline().strip() != "ply":
            raise DataError(f"{path}: missing 'ply' magic")
        if not fh.readline().strip().startswith("format ascii"):
            raise DataError(f"{path}: only ASCII PLY is supported")
        n_vertex = None
        props: list[str] = []
        in_vertex = False
        for line in fh:
            tokens = line.strip().split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                props.append(tokens[2])
            elif tokens[0] == "end_header":
                break
        if n_vertex is None:
            raise DataError(f"{path}: no vertex element")
        for name in ("x", "y", "z"):
            if name not in props:
                raise DataError(f"{path}: missing vertex property {name!r}")
        rows = np.loadtxt(fh, max_rows=n_vertex, ndmin=2)
    if rows.shape[0] != n_vertex or rows.shape[1] < len(props):
        raise DataError(f"{path}: vertex data does not match header")
    cols = {name: rows[:, i] for i, name in enumerate(props)}
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    colors = None
    if all(name in cols for name in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    return points, colors


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    points = np.atleast_2d(points)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    for i, p in enumerate(points):
        row = f"{p[0]!r} {p[1]!r} {p[2]!r}"
        if colors is not None:
            c = np.clip(np.rint(np.asarray(colors[i]) * 255.0), 0, 255).astype(int)
            row += f" {c[0]} {c[1]} {c[2]}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
