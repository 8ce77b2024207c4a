"""Held-out evaluation against the true scene and the A/B comparison record."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import binomtest

from .core import Camera, GaussianCloud
from .data import silhouette_regions
from .errors import ContractViolation
from .loss import normalize_uncertainty_for_viz, ssim
from .render import render

PSNR_CAP = 99.0
WHITE = (1.0, 1.0, 1.0)
NOT_COMPUTED = "not computed"


def psnr(gt, pred) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1], capped at 99 dB."""
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.shape != pred.shape:
        raise ContractViolation(f"shape mismatch: {gt.shape} vs {pred.shape}")
    mse = float(np.mean((gt - pred) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def fingerprint(obj) -> str:
    """Short stable hash of a JSON-serialisable value."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cloud_fingerprint(cloud: GaussianCloud) -> str:
    h = hashlib.sha256()
    for a in cloud.params().values():
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvalReport:
    psnr: list
    ssim: list
    cameras: list  # camera dicts, in evaluation order
    config_fingerprint: str = ""
    dataset_fingerprint: str = ""
    psnr_mean: float = 0.0
    psnr_std: float = 0.0
    ssim_mean: float = 0.0
    ssim_std: float = 0.0
    lpips: str = NOT_COMPUTED
    kind: str = "eval"

    @classmethod
    def build(cls, psnrs, ssims, cameras, config_fingerprint: str = "", dataset_fingerprint: str = ""):
        p = [float(x) for x in psnrs]
        s = [float(x) for x in ssims]
        return cls(p, s, cameras, config_fingerprint, dataset_fingerprint,
                   float(np.mean(p)), float(np.std(p)), float(np.mean(s)), float(np.std(s)))

    @property
    def n_views(self) -> int:
        return len(self.psnr)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        if d.get("kind", "eval") != "eval":
            raise ContractViolation(f"not an eval report: kind={d.get('kind')!r}")
        return cls(**d)


def evaluate(model: GaussianCloud, truth_scene: GaussianCloud, cameras, *, config_fingerprint: str = "",
             dataset_fingerprint: str = "") -> EvalReport:
    """Per-view PSNR and SSIM of ``model`` against ``truth_scene``, both on white."""
    cameras = list(cameras)
    if not cameras:
        raise ContractViolation("evaluate needs at least one camera")
    ps, ss = [], []
    for cam in cameras:
        truth = render(truth_scene, cam, WHITE).image
        pred = render(model, cam, WHITE).image
        ps.append(psnr(truth, pred))
        ss.append(ssim(truth, pred))
    return EvalReport.build(ps, ss, [c.to_dict() for c in cameras], config_fingerprint, dataset_fingerprint)


@dataclass
class ABReport:
    """Paired comparison, A minus B, over (seed, view) pairs.

    ``p_value`` is the one-sided sign test for "A better than B" on SSIM;
    ties are dropped from the test.
    """

    ssim_deltas: list  # per seed, per view
    psnr_deltas: list
    mean_ssim_delta: float
    mean_psnr_delta: float
    wins: int
    losses: int
    ties: int
    p_value: float
    mean_ssim_a: float
    mean_ssim_b: float
    seed_mean_ssim_deltas: list = field(default_factory=list)
    kind: str = "ab"

    @property
    def n_pairs(self) -> int:
        return self.wins + self.losses + self.ties

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ABReport:
        return cls(**d)


def sign_test(wins: int, losses: int) -> float:
    """One-sided binomial tail P(X >= wins) for X ~ Bin(wins + losses, 1/2)."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(binomtest(wins, n, 0.5, alternative="greater").pvalue)


def ab_report(report_a, report_b) -> ABReport:
    """Compare reports (or equal-length lists of per-seed reports) view by view."""
    ra = [report_a] if isinstance(report_a, EvalReport) else list(report_a)
    rb = [report_b] if isinstance(report_b, EvalReport) else list(report_b)
    if len(ra) != len(rb) or not ra:
        raise ContractViolation(f"need matching nonempty report lists, got {len(ra)} and {len(rb)}")
    ssim_d, psnr_d = [], []
    for a, b in zip(ra, rb):
        if a.cameras != b.cameras:
            raise ContractViolation("reports were evaluated on different cameras")
        ssim_d.append([x - y for x, y in zip(a.ssim, b.ssim)])
        psnr_d.append([x - y for x, y in zip(a.psnr, b.psnr)])
    flat = np.concatenate([np.asarray(d, dtype=np.float64) for d in ssim_d])
    wins = int((flat > 0).sum())
    losses = int((flat < 0).sum())
    ties = int((flat == 0).sum())
    return ABReport(
        ssim_d, psnr_d,
        float(flat.mean()),
        float(np.concatenate([np.asarray(d, dtype=np.float64) for d in psnr_d]).mean()),
        wins, losses, ties, sign_test(wins, losses),
        float(np.mean([r.ssim_mean for r in ra])), float(np.mean([r.ssim_mean for r in rb])),
        [float(np.mean(d)) for d in ssim_d],
    )


def uncertainty_localization(model1: GaussianCloud, model2: GaussianCloud, views, band: int = 2,
                             background=WHITE) -> dict:
    """Band-to-interior ratio of min-max normalised uncertainty maps.

    ``views`` yields ``(camera, alpha)`` pairs; the alpha map defines the
    silhouette.  Returns per-view means and the ratio of their averages.
    """
    band_means, inner_means = [], []
    for cam, alpha in views:
        u = np.abs(render(model1, cam, background).image - render(model2, cam, background).image)
        norm = normalize_uncertainty_for_viz(u)
        ring, inner = silhouette_regions(alpha, band)
        if ring.any() and inner.any():
            band_means.append(float(norm[ring].mean()))
            inner_means.append(float(norm[inner].mean()))
    b = float(np.mean(band_means)) if band_means else 0.0
    i = float(np.mean(inner_means)) if inner_means else 0.0
    return {"band_mean": b, "interior_mean": i, "ratio": b / i if i > 0 else math.inf,
            "views": len(band_means)}


def camera_list(report: EvalReport) -> list[Camera]:
    return [Camera(**c) for c in report.cameras]
