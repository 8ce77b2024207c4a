"""Dual-model uncertainty-aware optimization of Gaussian clouds.

Two clouds are initialised from different seeds and trained on the same
sampled view and background each iteration.  Their per-pixel disagreement
``U = |I1 - I2|`` down-weights the L1 term where the pseudo-labels conflict.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import PARAM_NAMES, GaussianCloud, logit, quat_to_rotation_batch, sigmoid
from .data import PseudoDataset
from .errors import ConfigError, ContractViolation, NonFiniteError, ScheduleError
from .loss import (LossBreakdown, baseline_loss, ensemble_total_loss, perceptual_loss_active,
                   total_loss, variance_loss)
from .render import render, render_backward, scaled_camera

log = logging.getLogger(__name__)

MODES = ("dual", "single_baseline", "learnable_variance", "ensemble_k")
VARIANCE_PARAM = "log_variance"

DEFAULT_RESOLUTION_MILESTONES = ((0.0, 0.25), (0.2, 0.5), (0.5, 1.0))
DEFAULT_ELEVATION_MILESTONES = ((0.0, (0,)), (0.5, (0, 1)), (0.8, (0, 1, 2)))

# stream tag mixed into the shared (view/background) seed sequence
_SHARED_STREAM = 0x5EED


@dataclass
class TrainConfig:
    total_iters: int = 5000
    lam: float = 5.0
    lam_s: float = 0.2
    lam_l: float = 0.5
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_variance: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # None: derived from the training cameras (1.1x their spread around the centroid)
    scene_extent: Optional[float] = None
    densify_interval: int = 100
    densify_start: int = 500
    # None: half of total_iters
    densify_stop: Optional[int] = None
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    opacity_reset_interval: int = 1500
    opacity_reset_value: float = 0.01
    split_scale_divisor: float = 1.6
    clone_scale_fraction: float = 0.01
    max_points: int = 200_000
    resolution_milestones: tuple = DEFAULT_RESOLUTION_MILESTONES
    elevation_milestones: tuple = DEFAULT_ELEVATION_MILESTONES
    seed1: int = 0
    seed2: int = 1
    init_points: int = 4096
    init_radius: float = 1.0
    init_opacity: float = 0.1
    init_variance: float = 0.01
    random_background: bool = True
    ablation_mode: str = "dual"
    ensemble_k: int = 3
    detach_uncertainty_weight: bool = False
    checkpoint_interval: int = 500

    def __post_init__(self):
        self.resolution_milestones = tuple((float(f), float(r)) for f, r in self.resolution_milestones)
        self.elevation_milestones = tuple((float(f), tuple(int(o) for o in ids))
                                          for f, ids in self.elevation_milestones)
        self.validate()

    def validate(self) -> None:
        if self.total_iters < 1:
            raise ConfigError(f"total_iters: must be >= 1, got {self.total_iters}")
        if self.ablation_mode not in MODES:
            raise ConfigError(f"ablation_mode: expected one of {MODES}, got {self.ablation_mode!r}")
        if self.ablation_mode == "ensemble_k" and self.ensemble_k < 2:
            raise ConfigError("ensemble_k: must be >= 2")
        for name in ("lr_position", "lr_position_final", "lr_color", "lr_opacity", "lr_scale",
                     "lr_rotation", "lr_variance", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be > 0")
        for name in ("lam", "lam_s", "lam_l", "densify_grad_threshold", "prune_opacity_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        for name in ("densify_interval", "opacity_reset_interval", "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.max_points < 1:
            raise ConfigError("max_points: must be >= 1")
        if not 0 < self.opacity_reset_value < 1 or not 0 < self.init_opacity < 1:
            raise ConfigError("opacity values must lie in (0, 1)")
        if self.split_scale_divisor <= 0 or self.init_radius <= 0 or self.init_variance <= 0:
            raise ConfigError("split_scale_divisor, init_radius and init_variance must be > 0")
        if self.scene_extent is not None and not self.scene_extent > 0:
            raise ConfigError("scene_extent: must be > 0")
        for name in ("resolution_milestones", "elevation_milestones"):
            ms = getattr(self, name)
            if not ms:
                raise ConfigError(f"{name}: must not be empty")
            fracs = [f for f, _ in ms]
            if any(not 0.0 <= f <= 1.0 for f in fracs):
                raise ConfigError(f"{name}: fractions must lie in [0, 1]")
            if any(b <= a for a, b in zip(fracs, fracs[1:])):
                raise ConfigError(f"{name}: fractions must be strictly increasing")
        if any(not 0 < r <= 1 for _, r in self.resolution_milestones):
            raise ConfigError("resolution_milestones: ratios must lie in (0, 1]")

    @property
    def n_models(self) -> int:
        return {"dual": 2, "ensemble_k": self.ensemble_k}.get(self.ablation_mode, 1)

    @property
    def effective_densify_stop(self) -> int:
        return self.total_iters // 2 if self.densify_stop is None else self.densify_stop

    def learning_rates(self) -> dict[str, float]:
        """Per-group base rates (positions before decay and extent scaling)."""
        return {
            "positions": self.lr_position,
            "log_scales": self.lr_scale,
            "rotations": self.lr_rotation,
            "colors_dc": self.lr_color,
            "opacity_logits": self.lr_opacity,
            VARIANCE_PARAM: self.lr_variance,
        }

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution_milestones"] = [list(m) for m in self.resolution_milestones]
        d["elevation_milestones"] = [[f, list(ids)] for f, ids in self.elevation_milestones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in names:
                raise ConfigError(f"{key}: unknown config key")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _milestone_iter(fraction: float, total: int) -> int:
    # first iteration at or past fraction * total (guarding float overshoot)
    return math.ceil(fraction * total - 1e-9)


def _piecewise(iteration: int, total: int, milestones):
    if not 0 <= iteration < total:
        raise ScheduleError(f"iteration {iteration} outside [0, {total})")
    value = milestones[0][1]
    for frac, v in milestones:
        if iteration >= _milestone_iter(frac, total):
            value = v
    return value


def resolution_schedule(iteration: int, total: int, milestones=DEFAULT_RESOLUTION_MILESTONES) -> float:
    """Render-resolution ratio in effect at ``iteration``."""
    return _piecewise(iteration, total, milestones)


def elevation_schedule(iteration: int, total: int, milestones=DEFAULT_ELEVATION_MILESTONES) -> frozenset:
    """Orbit ids whose frames may be sampled at ``iteration``."""
    return frozenset(_piecewise(iteration, total, milestones))


def sample_background(rng: np.random.Generator, random_background: bool = True) -> np.ndarray:
    if not random_background:
        return np.ones(3)
    return rng.uniform(0.0, 1.0, 3)


def position_lr(config: TrainConfig, iteration: int, extent: float) -> float:
    """Log-linear decay from ``lr_position`` to ``lr_position_final``, scaled by the scene extent."""
    t = min(max(iteration / config.total_iters, 0.0), 1.0)
    lr = math.exp((1.0 - t) * math.log(config.lr_position) + t * math.log(config.lr_position_final))
    return lr * extent


def camera_extent(cameras) -> float:
    centers = np.array([c.center for c in cameras])
    return 1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())


def adam_step(params: dict, grads: dict, moments: dict, lr, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-15, step: int = 1):
    """Bias-corrected Adam update applied in place to every group present in ``grads``.

    ``lr`` is a scalar or a per-group dict; ``moments[name]`` is ``(m, v)``;
    ``step`` is the 1-based update count used for bias correction.
    """
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractViolation(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m, v = moments[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, moments


@dataclass(eq=False)
class TrainerState:
    """Everything needed to continue a run bit-for-bit.

    ``models[k]`` maps parameter names to arrays; model ``k`` owns its own
    moments, step count, densification accumulators and rng stream.
    """

    models: list
    moments: list
    steps: list
    iteration: int
    grad_accum: list
    grad_count: list
    rng: np.random.Generator
    model_rngs: list
    scene_extent: float
    mode: str = "dual"

    @property
    def n_models(self) -> int:
        return len(self.models)

    def cloud(self, k: int) -> GaussianCloud:
        return GaussianCloud.from_params(self.models[k])

    @property
    def model1(self) -> GaussianCloud:
        return self.cloud(0)

    @property
    def model2(self) -> GaussianCloud | None:
        return self.cloud(1) if self.n_models > 1 else None

    def point_counts(self) -> list[int]:
        return [len(m["positions"]) for m in self.models]


class StepResult(NamedTuple):
    state: TrainerState
    loss: LossBreakdown
    uncertainty: np.ndarray
    view: int
    ratio: float
    orbits: frozenset
    background: np.ndarray


def model_seeds(config: TrainConfig) -> list[int]:
    seeds = [config.seed1, config.seed2]
    seeds += [config.seed2 + k - 1 for k in range(2, config.n_models)]
    return seeds[:config.n_models]


def _init_cloud(config: TrainConfig, rng: np.random.Generator) -> dict:
    n = config.init_points
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = d * (config.init_radius * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / 3.0))
    if n > 1:
        k = min(4, n)
        dist, _ = cKDTree(pos).query(pos, k=k)
        dist2 = np.maximum(np.mean(dist[:, 1:] ** 2, axis=1), 1e-7)
    else:
        dist2 = np.full(n, (0.1 * config.init_radius) ** 2)
    params = {
        "positions": pos,
        "log_scales": np.repeat(0.5 * np.log(dist2)[:, None], 3, axis=1),
        "rotations": np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        "colors_dc": np.full((n, 3), 0.5),
        "opacity_logits": np.full(n, float(logit(config.init_opacity))),
    }
    if config.ablation_mode == "learnable_variance":
        params[VARIANCE_PARAM] = np.full((n, 1), math.log(config.init_variance))
    return params


def init_models(config: TrainConfig, dataset: PseudoDataset | None = None) -> TrainerState:
    """Fresh state: one cloud per model, each drawn from its own seed."""
    if config.init_points < 1:
        raise ContractViolation("init_points must be >= 1")
    if config.lam_l > 0 and not perceptual_loss_active():
        log.warning("lam_l=%g but no perceptual loss is registered; the term contributes 0", config.lam_l)
    if config.scene_extent is not None:
        extent = config.scene_extent
    elif dataset is not None and len(dataset):
        extent = camera_extent([f.camera for f in dataset.frames])
    else:
        extent = 4.4
    models, moments, rngs = [], [], []
    for seed in model_seeds(config):
        rng = np.random.default_rng(seed)
        p = _init_cloud(config, rng)
        models.append(p)
        moments.append({k: (np.zeros_like(a), np.zeros_like(a)) for k, a in p.items()})
        rngs.append(rng)
    n = config.init_points
    shared = np.random.default_rng(np.random.SeedSequence([config.seed1, config.seed2, _SHARED_STREAM]))
    return TrainerState(models, moments, [0] * len(models), 0, [np.zeros(n) for _ in models],
                        [np.zeros(n) for _ in models], shared, rngs, extent, config.ablation_mode)


def _render_model(params: dict, cam, bg):
    cloud = GaussianCloud.from_params(params)
    if VARIANCE_PARAM in params:
        return cloud, render(cloud, cam, bg, extra_features=np.exp(params[VARIANCE_PARAM]))
    return cloud, render(cloud, cam, bg)


def _check_finite(state: TrainerState) -> None:
    for k, p in enumerate(state.models):
        for name, a in p.items():
            if not np.isfinite(a).all():
                raise NonFiniteError(f"model {k + 1}: non-finite {name} at iteration {state.iteration}")


def train_step(state: TrainerState, dataset: PseudoDataset, config: TrainConfig) -> StepResult:
    """One optimization iteration (mutates and returns ``state``)."""
    it = state.iteration
    total = config.total_iters
    ratio = resolution_schedule(it, total, config.resolution_milestones)
    orbits = elevation_schedule(it, total, config.elevation_milestones)
    active = dataset.indices_for_orbits(orbits)
    if len(active) == 0:
        raise ScheduleError(f"no training views in orbits {sorted(orbits)} at iteration {it}")
    view = int(active[state.rng.integers(len(active))])
    bg = sample_background(state.rng, config.random_background)
    gt = dataset.label(view, ratio, bg)
    cam = scaled_camera(dataset.frames[view].camera, ratio)

    rendered = [_render_model(p, cam, bg) for p in state.models]
    images = [out.image for _, out in rendered]
    grad_extra = [None] * len(images)
    mode = config.ablation_mode
    if mode == "dual":
        loss, g1, g2, u = total_loss(gt, images[0], images[1], config.lam, config.lam_s, config.lam_l,
                                     detach_uncertainty_weight=config.detach_uncertainty_weight)
        grads_img = [g1, g2]
    elif mode == "ensemble_k":
        loss, grads_img, u = ensemble_total_loss(gt, images, config.lam, config.lam_s, config.lam_l)
    elif mode == "single_baseline":
        loss, g = baseline_loss(gt, images[0], config.lam_s, config.lam_l)
        grads_img, u = [g], np.zeros_like(gt)
    else:
        u = rendered[0][1].extra[..., 0]
        loss, g, gu = variance_loss(gt, images[0], u, config.lam, config.lam_s, config.lam_l)
        grads_img, grad_extra = [g], [gu[..., None]]
        u = np.repeat(u[..., None], 3, axis=2)

    lr = config.learning_rates()
    lr["positions"] = position_lr(config, it, state.scene_extent)
    for k, ((cloud, out), gimg) in enumerate(zip(rendered, grads_img)):
        pg = render_backward(cloud, cam, bg, out, gimg, grad_extra[k])
        grads = pg.params()
        if VARIANCE_PARAM in state.models[k]:
            grads[VARIANCE_PARAM] = pg.extra * np.exp(state.models[k][VARIANCE_PARAM])
        state.steps[k] += 1
        adam_step(state.models[k], grads, state.moments[k], lr, config.adam_beta1, config.adam_beta2,
                  config.adam_eps, state.steps[k])
        vis = out.visible
        state.grad_accum[k][vis] += np.linalg.norm(pg.means_2d[vis], axis=1)
        state.grad_count[k][vis] += 1

    state.iteration = done = it + 1
    if config.densify_start <= done <= config.effective_densify_stop:
        if done % config.densify_interval == 0:
            densify_and_prune(state, config)
        if done % config.opacity_reset_interval == 0:
            reset_opacity(state, config)
    _check_finite(state)
    return StepResult(state, loss, u, view, ratio, orbits, bg)


def _take_rows(arr: np.ndarray, src: np.ndarray, fresh: np.ndarray | None = None) -> np.ndarray:
    out = arr[src]
    if fresh is not None:
        out[fresh] = 0.0
    return out


def densify_and_prune(state: TrainerState, config: TrainConfig) -> TrainerState:
    """Clone small / split large high-gradient points, then drop near-transparent ones."""
    for k, p in enumerate(state.models):
        n = len(p["positions"])
        avg = state.grad_accum[k] / np.maximum(state.grad_count[k], 1.0)
        cand = avg > config.densify_grad_threshold
        room = max(0, config.max_points - n)
        if cand.sum() > room:
            idx = np.flatnonzero(cand)
            keep = idx[np.argsort(-avg[idx], kind="stable")[:room]]
            cand = np.zeros(n, dtype=bool)
            cand[keep] = True
        max_scale = np.exp(p["log_scales"]).max(axis=1)
        small = max_scale <= config.clone_scale_fraction * state.scene_extent
        clone = np.flatnonzero(cand & small)
        split = np.flatnonzero(cand & ~small)

        stay = np.ones(n, dtype=bool)
        stay[split] = False
        base = np.flatnonzero(stay)
        src = np.concatenate([base, clone, np.repeat(split, 2)])
        fresh = np.zeros(len(src), dtype=bool)
        fresh[len(base):] = True

        new = {name: _take_rows(a, src) for name, a in p.items()}
        if len(split):
            rows = slice(len(base) + len(clone), len(src))
            parents = np.repeat(split, 2)
            std = np.exp(p["log_scales"][parents])
            local = state.model_rngs[k].normal(0.0, std)
            rot = quat_to_rotation_batch(p["rotations"][parents])
            new["positions"][rows] = p["positions"][parents] + np.einsum("nij,nj->ni", rot, local)
            new["log_scales"][rows] = p["log_scales"][parents] - math.log(config.split_scale_divisor)

        keep = sigmoid(new["opacity_logits"]) >= config.prune_opacity_threshold
        if not keep.any():
            keep[int(np.argmax(new["opacity_logits"]))] = True
        state.models[k] = {name: a[keep] for name, a in new.items()}
        state.moments[k] = {
            name: (_take_rows(m, src, fresh)[keep], _take_rows(v, src, fresh)[keep])
            for name, (m, v) in state.moments[k].items()
        }
        m = int(keep.sum())
        state.grad_accum[k] = np.zeros(m)
        state.grad_count[k] = np.zeros(m)
    return state


def reset_opacity(state: TrainerState, config: TrainConfig) -> TrainerState:
    """Cap opacities at ``opacity_reset_value`` and clear their optimizer moments."""
    cap = float(logit(config.opacity_reset_value))
    for k, p in enumerate(state.models):
        p["opacity_logits"] = np.minimum(p["opacity_logits"], cap)
        m, v = state.moments[k]["opacity_logits"]
        m[:] = 0.0
        v[:] = 0.0
    return state


def training_view_l1(cloud: GaussianCloud, dataset: PseudoDataset) -> float:
    """Mean L1 of white-background renders against the full-resolution labels."""
    white = np.ones(3)
    errs = [np.abs(render(cloud, f.camera, white).image - dataset.label(i, 1.0, white)).mean()
            for i, f in enumerate(dataset.frames)]
    return float(np.mean(errs))


def select_output_model(state: TrainerState, dataset: PseudoDataset) -> tuple[int, GaussianCloud]:
    """Index and cloud of the model with the lowest training-view L1; ties go to the lower index."""
    scores = [training_view_l1(state.cloud(k), dataset) for k in range(state.n_models)]
    best = int(np.argmin(scores))
    return best, state.cloud(best)


@dataclass
class StepRecord:
    iteration: int
    loss: dict
    points: list
    ratio: float
    orbits: list
    wall_ms: float
    view: int = -1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def fit(state: TrainerState, dataset: PseudoDataset, config: TrainConfig, *,
        until: int | None = None, on_step: Callable[[StepRecord, StepResult], None] | None = None,
        on_checkpoint: Callable[[TrainerState], None] | None = None) -> TrainerState:
    """Run ``train_step`` from ``state.iteration`` up to ``until`` (default: total_iters)."""
    stop = config.total_iters if until is None else min(until, config.total_iters)
    while state.iteration < stop:
        t0 = time.perf_counter()
        res = train_step(state, dataset, config)
        if on_step is not None:
            rec = StepRecord(state.iteration, res.loss.to_dict(), state.point_counts(), res.ratio,
                             sorted(res.orbits), 1e3 * (time.perf_counter() - t0), res.view)
            on_step(rec, res)
        if on_checkpoint is not None and state.iteration % config.checkpoint_interval == 0:
            on_checkpoint(state)
    return state


def state_equal(a: TrainerState, b: TrainerState) -> bool:
    """Bitwise comparison of model parameters."""
    if a.n_models != b.n_models:
        return False
    for pa, pb in zip(a.models, b.models):
        if pa.keys() != pb.keys():
            return False
        if any(pa[n].shape != pb[n].shape or not np.array_equal(pa[n], pb[n]) for n in pa):
            return False
    return True


__all__ = [
    "MODES", "TrainConfig", "TrainerState", "StepResult", "StepRecord", "adam_step", "init_models",
    "train_step", "densify_and_prune", "reset_opacity", "resolution_schedule", "elevation_schedule",
    "sample_background", "select_output_model", "fit", "position_lr", "camera_extent", "PARAM_NAMES",
]
