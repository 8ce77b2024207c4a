"""Finite-difference check of render_backward composed with total_loss.

Entries are skipped, and counted, when the +h / -h evaluations straddle a
point where the loss is not differentiable:

* an L1 kink: some residual ``pred - gt`` or ``pred1 - pred2`` changes sign
  or sits within 1e-6 of zero while moving;
* a change in contribution structure: which Gaussians touch which pixel,
  their order, the early-stop index or the alpha clamp.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dualsplat.core import Camera, GaussianCloud
from dualsplat.loss import total_loss
from dualsplat.render import render, render_backward

from oracles import random_cloud

H = 1e-5
KINK = 1e-6
REL_TOL = 1e-4
# denominators below this are treated as this (both gradients effectively zero)
ABS_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    checked: int = 0
    excluded_kink: int = 0
    excluded_structure: int = 0
    max_rel: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def excluded(self) -> int:
        return self.excluded_kink + self.excluded_structure

    def merge(self, other: GradCheckResult) -> None:
        self.checked += other.checked
        self.excluded_kink += other.excluded_kink
        self.excluded_structure += other.excluded_structure
        self.max_rel = max(self.max_rel, other.max_rel)
        self.failures.extend(other.failures)


def _structure(out):
    rec = out.contribution_record()
    return (rec.offsets.tobytes(), rec.gaussian.tobytes(), (rec.alpha >= out.alpha_max).tobytes())


def _evaluate(clouds, cam, bg, gt, weights):
    outs = [render(c, cam, bg) for c in clouds]
    br, g1, g2, _ = total_loss(gt, outs[0].image, outs[1].image, *weights)
    return br.total, outs, (g1, g2)


def _residuals(outs, gt):
    p1, p2 = outs[0].image, outs[1].image
    return np.concatenate([(p1 - gt).ravel(), (p2 - gt).ravel(), (p1 - p2).ravel()])


def random_problem(seed: int, size: int = 16, max_points: int = 10):
    rng = np.random.default_rng(seed)
    clouds = [random_cloud(rng, int(rng.integers(1, max_points + 1))) for _ in range(2)]
    cam = Camera(float(rng.uniform(0, 360)), float(rng.uniform(-60, 60)), 4.0, 33.8, size, size)
    gt = rng.uniform(0.0, 1.0, (size, size, 3))
    bg = rng.uniform(0.0, 1.0, 3)
    return clouds, cam, bg, gt


def check_problem(clouds, cam, bg, gt, weights=(5.0, 0.2, 0.5), h: float = H) -> GradCheckResult:
    res = GradCheckResult()
    _, outs, grads_img = _evaluate(clouds, cam, bg, gt, weights)
    analytic = [render_backward(c, cam, bg, o, g).params() for c, o, g in zip(clouds, outs, grads_img)]
    base_r = _residuals(outs, gt)
    base_s = [_structure(o) for o in outs]
    for k, cloud in enumerate(clouds):
        for name, arr in cloud.params().items():
            flat = arr.reshape(-1)
            ana = analytic[k][name].reshape(-1)
            for e in range(flat.size):
                orig = flat[e]
                vals, rs, ss = [], [], []
                for step in (h, -h):
                    flat[e] = orig + step
                    v, o, _ = _evaluate(clouds, cam, bg, gt, weights)
                    vals.append(v)
                    rs.append(_residuals(o, gt))
                    ss.append([_structure(x) for x in o])
                flat[e] = orig
                if ss[0] != base_s or ss[1] != base_s:
                    res.excluded_structure += 1
                    continue
                moving = (rs[0] != base_r) | (rs[1] != base_r)
                flips = np.sign(rs[0]) != np.sign(rs[1])
                if flips.any() or (np.abs(base_r[moving]) < KINK).any():
                    res.excluded_kink += 1
                    continue
                fd = (vals[0] - vals[1]) / (2 * h)
                rel = abs(ana[e] - fd) / max(abs(ana[e]), abs(fd), ABS_FLOOR)
                res.checked += 1
                res.max_rel = max(res.max_rel, rel)
                if rel >= REL_TOL:
                    res.failures.append((k, name, e, float(ana[e]), float(fd), rel))
    return res


def run_gradcheck(seeds, **kw) -> GradCheckResult:
    total = GradCheckResult()
    for s in seeds:
        total.merge(check_problem(*random_problem(s, **kw)))
    return total


def cloud_with(cloud: GaussianCloud, **fields) -> GaussianCloud:
    p = {k: v.copy() for k, v in cloud.params().items()}
    p.update(fields)
    return GaussianCloud.from_params(p)
