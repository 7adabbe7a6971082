"""Optimization loop: window sampling, masked loss, Adam, densification.

One iteration samples an event window, accumulates it into a target
change image, renders the predicted log difference between the window's
endpoint poses, applies the mixed L1/SSIM loss (L1 restricted to event
pixels by default), backpropagates through the full render chain and
steps Adam per parameter family. Periodic refinement clones / splits
high-gradient Gaussians and prunes transparent or oversized ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt
from .camera import Camera
from .errors import ConfigError, DataError, NumericError
from .events import ContrastThresholds, EventStream, accumulate_counts, sample_window
from .metrics import resolve_data_range, ssim_backward, ssim_map
from .metrics import ssim  # re-exported: evaluator scores with the same SSIM
from .rasterizer import CloudGradients, render_log_diff, render_log_diff_backward
from .scene import GaussianCloud, logit, sigmoid
from .trajectory import PoseSpline, pose_at

MASK_MODES = ("none", "l1_only", "both")

THRESHOLD_FLOOR = 1e-3  # learned contrast thresholds never drop below this


@dataclass
class LossConfig:
    """Mixing weight, SSIM window, and how the event mask is applied."""

    lambda_ssim: float = 0.2
    ssim_window: int = 11
    mask_mode: str = "l1_only"

    def __post_init__(self):
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lambda_ssim}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.ssim_window % 2 != 1:
            raise ConfigError("ssim_window must be odd")


@dataclass
class DensifyConfig:
    """Refinement thresholds; Gaussians larger than 10x scale_threshold in
    world units are pruned as too large."""

    grad_threshold: float = 2e-4    # on mean NDC positional gradient norms
    scale_threshold: float = 0.01   # world units; split above, clone below
    opacity_floor: float = 0.005
    interval: int = 100
    start_iteration: int = 500
    stop_iteration: int = 15000
    split_factor: float = 1.6

    def __post_init__(self):
        for name in ("grad_threshold", "scale_threshold", "opacity_floor",
                     "interval", "start_iteration", "stop_iteration", "split_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"densify.{name} must be positive")


@dataclass
class TrainConfig:
    iterations: int = 40000
    position_lr_init: float = 1.6e-4
    position_lr_final: float = 1.6e-6
    feature_lr: float = 0.0025
    opacity_lr: float = 0.01   # lowered from the usual 0.05 for stability
    scaling_lr: float = 0.005
    rotation_lr: float = 0.001
    window_min_frac: float = 0.01
    window_max_frac: float = 0.10
    sh_warmup_interval: int = 1000
    delta_pos: float = 0.25
    delta_neg: float = 0.25
    learn_thresholds: bool = False
    threshold_lr: float = 1e-3
    opacity_reset_interval: int = 3000  # 0 disables the periodic reset
    near: float = 0.01
    log_eps: float = 1e-5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0 < self.window_min_frac <= self.window_max_frac <= 1:
            raise ConfigError("window fractions must satisfy 0 < min <= max <= 1")
        if self.delta_pos <= 0 or self.delta_neg <= 0:
            raise ConfigError("contrast thresholds must be positive")

    def thresholds(self) -> ContrastThresholds:
        return ContrastThresholds(self.delta_pos, self.delta_neg)


@dataclass
class LossResult:
    total: float
    l1: float
    ssim_value: float
    grad_pred: np.ndarray
    grad_target: np.ndarray | None
    empty_mask_fallback: bool


def compute_loss(pred: np.ndarray, target: np.ndarray, mask, cfg: LossConfig,
                 need_target_grad: bool = False) -> LossResult:
    """(1 - lambda) L1 + lambda (1 - SSIM) with analytic gradients.

    mask_mode 'l1_only' restricts the L1 mean to event pixels while SSIM
    sees the whole image (SSIM needs spatial windows); 'both' restricts
    the SSIM map average too; 'none' ignores the mask. An all-false mask
    falls back to unmasked L1 and flags the result.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DataError(f"pred shape {pred.shape} != target shape {target.shape}")
    lam = cfg.lambda_ssim

    use_mask = cfg.mask_mode != "none" and mask is not None
    fallback = False
    if use_mask and not mask.any():
        use_mask = False
        fallback = True

    diff = pred - target
    if use_mask:
        n_l1 = int(mask.sum())
        l1 = float(np.abs(diff[mask]).mean())
        g_l1 = np.where(mask, np.sign(diff), 0.0) / n_l1
    else:
        l1 = float(np.abs(diff).mean())
        g_l1 = np.sign(diff) / diff.size

    cache = ssim_map(pred, target, window=cfg.ssim_window,
                     data_range=resolve_data_range(target))
    if cfg.mask_mode == "both" and use_mask:
        n_s = int(mask.sum())
        ssim_value = float(cache.ssim_map[mask].mean())
        w_map = np.where(mask, 1.0 / n_s, 0.0)
    else:
        ssim_value = float(cache.ssim_map.mean())
        w_map = np.full(pred.shape, 1.0 / pred.size)

    total = (1.0 - lam) * l1 + lam * (1.0 - ssim_value)
    g_ssim_pred, g_ssim_target = ssim_backward(cache, -lam * w_map)
    grad_pred = (1.0 - lam) * g_l1 + g_ssim_pred

    grad_target = None
    if need_target_grad:
        grad_target = -(1.0 - lam) * g_l1 + g_ssim_target
    return LossResult(total=total, l1=l1, ssim_value=ssim_value,
                      grad_pred=grad_pred, grad_target=grad_target,
                      empty_mask_fallback=fallback)


# ---------------------------------------------------------------------------
# Adam

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lrs: dict,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """One Adam update, in place; params/grads/lrs are per-family dicts."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + eps)


def position_lr(cfg: TrainConfig, iteration: int) -> float:
    """Exponential decay from init to final over the configured iterations."""
    if cfg.iterations <= 1:
        return cfg.position_lr_init
    frac = min(max((iteration - 1) / (cfg.iterations - 1), 0.0), 1.0)
    return float(cfg.position_lr_init
                 * (cfg.position_lr_final / cfg.position_lr_init) ** frac)


# ---------------------------------------------------------------------------
# Densification

@dataclass
class DensifyStats:
    """Positional-gradient statistics accumulated between refinements."""

    grad_norm_sum: np.ndarray  # (N,) sum of NDC-unit mean2d gradient norms
    world_grad_sum: np.ndarray  # (N, 3) sum of world-space mean gradients
    count: np.ndarray          # (N,) visibility counts

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def update(self, grads: CloudGradients, visible: np.ndarray, cam: Camera):
        ndc = grads.mean2d_pixels * np.array([cam.width / 2.0, cam.height / 2.0])
        self.grad_norm_sum += np.where(visible, np.linalg.norm(ndc, axis=1), 0.0)
        self.world_grad_sum += np.where(visible[:, None], grads.means, 0.0)
        self.count += visible


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats,
                      cfg: DensifyConfig, rng):
    """Clone / split over-threshold Gaussians, prune weak or oversized ones.

    Returns (new_cloud, source_index) where source_index maps each new row
    to its originating row, or -1 for freshly created children (their
    optimizer moments start at zero).
    """
    n = len(cloud)
    if n == 0:
        raise NumericError("densify called on an empty cloud")
    seen = stats.count > 0
    avg = np.where(seen, stats.grad_norm_sum / np.maximum(stats.count, 1), 0.0)
    scales = cloud.scales()
    max_scale = scales.max(axis=1)

    densify = avg > cfg.grad_threshold
    split = densify & (max_scale > cfg.scale_threshold)
    clone = densify & ~split

    alphas = cloud.opacities()
    prune = (alphas < cfg.opacity_floor) | (max_scale > 10.0 * cfg.scale_threshold)

    parts_idx = []
    parts = {"means": [], "log_scales": [], "rotations": [],
             "opacity_logits": [], "sh_coeffs": []}

    keep = ~prune & ~split
    parts_idx.append(np.flatnonzero(keep))
    parts["means"].append(cloud.means[keep])
    parts["log_scales"].append(cloud.log_scales[keep])
    parts["rotations"].append(cloud.rotations[keep])
    parts["opacity_logits"].append(cloud.opacity_logits[keep])
    parts["sh_coeffs"].append(cloud.sh_coeffs[keep])

    clone_idx = np.flatnonzero(clone & ~prune)
    if clone_idx.size:
        g = stats.world_grad_sum[clone_idx] / np.maximum(stats.count[clone_idx], 1)[:, None]
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(norms > 0, -g / np.maximum(norms, 1e-30), 0.0)
        step = 0.5 * scales[clone_idx].mean(axis=1, keepdims=True)
        parts_idx.append(np.full(clone_idx.size, -1))
        parts["means"].append(cloud.means[clone_idx] + direction * step)
        parts["log_scales"].append(cloud.log_scales[clone_idx])
        parts["rotations"].append(cloud.rotations[clone_idx])
        parts["opacity_logits"].append(cloud.opacity_logits[clone_idx])
        parts["sh_coeffs"].append(cloud.sh_coeffs[clone_idx])

    split_idx = np.flatnonzero(split & ~prune)
    if split_idx.size:
        for _ in range(2):
            eta = rng.standard_normal((split_idx.size, 3))
            rot = _rot_mats(cloud.rotations[split_idx])
            offsets = np.einsum("nij,nj->ni", rot, scales[split_idx] * eta)
            parts_idx.append(np.full(split_idx.size, -1))
            parts["means"].append(cloud.means[split_idx] + offsets)
            parts["log_scales"].append(
                cloud.log_scales[split_idx] - math.log(cfg.split_factor))
            parts["rotations"].append(cloud.rotations[split_idx])
            parts["opacity_logits"].append(cloud.opacity_logits[split_idx])
            parts["sh_coeffs"].append(cloud.sh_coeffs[split_idx])

    new_n = sum(len(ix) for ix in parts_idx)
    if new_n == 0:
        raise NumericError(
            f"refinement would empty the cloud (pruned {int(prune.sum())} of {n})"
        )
    new_cloud = GaussianCloud(
        means=np.concatenate(parts["means"]),
        log_scales=np.concatenate(parts["log_scales"]),
        rotations=np.concatenate(parts["rotations"]),
        opacity_logits=np.concatenate(parts["opacity_logits"]),
        sh_coeffs=np.concatenate(parts["sh_coeffs"]),
        sh_degree=cloud.sh_degree,
        background=cloud.background,
    )
    source_index = np.concatenate(parts_idx)
    return new_cloud, source_index


def _rot_mats(quats: np.ndarray) -> np.ndarray:
    from .geometry import quat_normalize, quat_to_matrix

    return quat_to_matrix(quat_normalize(quats))


def _remap_adam(state: AdamState, source_index: np.ndarray, families: dict) -> None:
    """Carry moments of surviving rows, zero-init fresh children."""
    for name, arr in families.items():
        if name in ("delta",):
            continue
        old_m, old_v = state.m[name], state.v[name]
        new_m = np.zeros_like(arr)
        new_v = np.zeros_like(arr)
        carried = source_index >= 0
        new_m[carried] = old_m[source_index[carried]]
        new_v[carried] = old_v[source_index[carried]]
        state.m[name] = new_m
        state.v[name] = new_v


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainResult:
    cloud: GaussianCloud
    metrics: list
    thresholds: ContrastThresholds
    empty_mask_fallbacks: int


def _cloud_params(cloud: GaussianCloud) -> dict:
    return {
        "means": cloud.means,
        "log_scales": cloud.log_scales,
        "rotations": cloud.rotations,
        "opacity_logits": cloud.opacity_logits,
        "sh_dc": cloud.sh_coeffs[:, :1, :],
        "sh_rest": cloud.sh_coeffs[:, 1:, :],
    }


def _lrs(cfg: TrainConfig, iteration: int) -> dict:
    return {
        "means": position_lr(cfg, iteration),
        "log_scales": cfg.scaling_lr,
        "rotations": cfg.rotation_lr,
        "opacity_logits": cfg.opacity_lr,
        "sh_dc": cfg.feature_lr,
        "sh_rest": cfg.feature_lr / 20.0,
    }


def train(stream: EventStream, spline: PoseSpline, cam: Camera,
          cloud: GaussianCloud, cfg: TrainConfig,
          state: "TrainState | None" = None,
          checkpoint_path=None, checkpoint_every: int = 0) -> TrainResult:
    """Run the optimization loop; returns the trained cloud and metrics.

    Passing a TrainState resumes mid-run (bit-exact continuation of the
    same seed). checkpoint_every > 0 writes periodic resumable snapshots.
    """
    if state is None:
        state = TrainState.fresh(cloud, cfg)
    cloud = state.cloud
    rng = state.rng
    adam = state.adam
    stats = state.stats
    delta = state.delta  # (2,) learned or fixed contrast thresholds

    if len(cloud) == 0:
        raise NumericError("training requires a non-empty initial cloud")

    remap = None
    if any(abs(d) > 0 for d in cam.distortion):
        from .camera import build_undistort_map

        remap = build_undistort_map(cam)

    metrics = list(state.metrics)
    fallbacks = state.empty_mask_fallbacks
    while state.iteration < cfg.iterations:
        i = state.iteration + 1
        window = sample_window(stream, rng, cfg.window_min_frac, cfg.window_max_frac)
        pos_counts, neg_counts, mask, _ = accumulate_counts(stream, window, remap)
        target = pos_counts * delta[0] - neg_counts * delta[1]

        t_start = int(stream.t[window[0] - 1])
        t_end = int(stream.t[window[1] - 1])
        pose_start = pose_at(spline, t_start)
        pose_end = pose_at(spline, t_end)

        active_degree = min(cloud.sh_degree, i // max(cfg.sh_warmup_interval, 1))
        render = render_log_diff(cloud, cam, pose_start, pose_end,
                                 near=cfg.near, active_degree=active_degree,
                                 eps=cfg.log_eps)
        loss = compute_loss(render.values, target, mask, cfg.loss,
                            need_target_grad=cfg.learn_thresholds)
        if not math.isfinite(loss.total):
            raise NumericError(
                f"non-finite loss at iteration {i}: total={loss.total} "
                f"l1={loss.l1} ssim={loss.ssim_value} window={window}"
            )
        fallbacks += loss.empty_mask_fallback

        grads = render_log_diff_backward(render, loss.grad_pred, cam)

        visible = (render.state_start.cache.visible
                   | render.state_end.cache.visible)
        stats.update(grads, visible, cam)

        params = _cloud_params(cloud)
        gdict = {
            "means": grads.means,
            "log_scales": grads.log_scales,
            "rotations": grads.rotations,
            "opacity_logits": grads.opacity_logits,
            "sh_dc": grads.sh_coeffs[:, :1, :],
            "sh_rest": grads.sh_coeffs[:, 1:, :],
        }
        if cfg.learn_thresholds:
            params["delta"] = delta
            gdict["delta"] = np.array([
                float((loss.grad_target * pos_counts).sum()),
                float(-(loss.grad_target * neg_counts).sum()),
            ])
        lrs = _lrs(cfg, i)
        lrs["delta"] = cfg.threshold_lr
        adam_step(params, gdict, adam, lrs)
        if cfg.learn_thresholds:
            np.maximum(delta, THRESHOLD_FLOOR, out=delta)
        cloud.rotations /= np.linalg.norm(cloud.rotations, axis=1, keepdims=True)

        if not np.isfinite(cloud.means).all():
            raise NumericError(f"non-finite parameters after iteration {i}")

        dc = cfg.densify
        if (dc.start_iteration <= i <= dc.stop_iteration
                and i % dc.interval == 0):
            cloud, source_index = densify_and_prune(cloud, stats, dc, rng)
            _remap_adam(adam, source_index, _cloud_params(cloud))
            stats = DensifyStats.zeros(len(cloud))

        if (cfg.opacity_reset_interval > 0 and i % cfg.opacity_reset_interval == 0
                and i <= dc.stop_iteration):
            np.copyto(cloud.opacity_logits,
                      logit(np.minimum(cloud.opacities(), 0.01)))
            adam.m["opacity_logits"][:] = 0.0
            adam.v["opacity_logits"][:] = 0.0

        metrics.append({
            "iter": i,
            "loss": loss.total,
            "l1": loss.l1,
            "ssim": loss.ssim_value,
            "num_gaussians": len(cloud),
            "lr_pos": lrs["means"],
        })

        state = TrainState(cloud=cloud, adam=adam, stats=stats, rng=rng,
                           iteration=i, delta=delta, metrics=metrics,
                           empty_mask_fallbacks=fallbacks)
        if checkpoint_path is not None and checkpoint_every > 0 \
                and i % checkpoint_every == 0:
            state.save(checkpoint_path)

    return TrainResult(cloud=cloud, metrics=metrics,
                       thresholds=ContrastThresholds(float(delta[0]), float(delta[1])),
                       empty_mask_fallbacks=fallbacks)


@dataclass
class TrainState:
    """Resumable optimizer snapshot: cloud, moments, RNG, and counters."""

    cloud: GaussianCloud
    adam: AdamState
    stats: DensifyStats
    rng: np.random.Generator
    iteration: int
    delta: np.ndarray
    metrics: list
    empty_mask_fallbacks: int = 0

    @classmethod
    def fresh(cls, cloud: GaussianCloud, cfg: TrainConfig) -> "TrainState":
        cloud = cloud.copy()
        params = _cloud_params(cloud)
        if cfg.learn_thresholds:
            params = dict(params, delta=np.zeros(2))
        adam = AdamState.for_params(params)
        return cls(
            cloud=cloud,
            adam=adam,
            stats=DensifyStats.zeros(len(cloud)),
            rng=np.random.default_rng(cfg.seed),
            iteration=0,
            delta=np.array([cfg.delta_pos, cfg.delta_neg], dtype=np.float64),
            metrics=[],
        )

    def save(self, path) -> None:
        import json

        arrays = {
            "means": self.cloud.means,
            "log_scales": self.cloud.log_scales,
            "rotations": self.cloud.rotations,
            "opacity_logits": self.cloud.opacity_logits,
            "sh_coeffs": self.cloud.sh_coeffs,
            "background": self.cloud.background,
            "stats_grad_norm_sum": self.stats.grad_norm_sum,
            "stats_world_grad_sum": self.stats.world_grad_sum,
            "stats_count": self.stats.count,
            "delta": self.delta,
        }
        for name, m in self.adam.m.items():
            arrays[f"adam_m_{name}"] = m
            arrays[f"adam_v_{name}"] = self.adam.v[name]
        meta = {
            "kind": "train_state",
            "sh_degree": self.cloud.sh_degree,
            "iteration": self.iteration,
            "adam_step": self.adam.step,
            "rng_state": json.dumps(self.rng.bit_generator.state),
            "empty_mask_fallbacks": self.empty_mask_fallbacks,
            "metrics": self.metrics,
        }
        ckpt.write_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        import json

        arrays, meta = ckpt.read_container(path)
        if meta.get("kind") != "train_state":
            raise DataError(f"{path}: not a resumable training checkpoint")
        cloud = GaussianCloud(
            means=arrays["means"], log_scales=arrays["log_scales"],
            rotations=arrays["rotations"], opacity_logits=arrays["opacity_logits"],
            sh_coeffs=arrays["sh_coeffs"], sh_degree=int(meta["sh_degree"]),
            background=arrays["background"],
        )
        m = {}
        v = {}
        for name in list(arrays):
            if name.startswith("adam_m_"):
                fam = name[len("adam_m_"):]
                m[fam] = arrays[name]
                v[fam] = arrays[f"adam_v_{fam}"]
        # Rebind moment views of the cloud's own arrays where shapes allow;
        # copies are fine since adam mutates its own buffers only.
        adam = AdamState(m=m, v=v, step=int(meta["adam_step"]))
        stats = DensifyStats(
            grad_norm_sum=arrays["stats_grad_norm_sum"],
            world_grad_sum=arrays["stats_world_grad_sum"],
            count=arrays["stats_count"],
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(meta["rng_state"])
        return cls(cloud=cloud, adam=adam, stats=stats, rng=rng,
                   iteration=int(meta["iteration"]),
                   delta=arrays["delta"].copy(),
                   metrics=list(meta.get("metrics", [])),
                   empty_mask_fallbacks=int(meta.get("empty_mask_fallbacks", 0)))
