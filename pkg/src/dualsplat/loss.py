"""Training objectives and their analytic gradients.

Images are float64 arrays of shape (H, W, 3).  Every loss is a mean over
pixels and channels, so weights do not depend on resolution.  ``sign(0)``
is taken as 0 in all subgradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractViolation

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# (gt, pred) -> (scalar, d scalar / d pred)
PerceptualLoss = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]
_perceptual: Optional[PerceptualLoss] = None


def register_perceptual_loss(fn: Optional[PerceptualLoss]) -> None:
    """Install (or with ``None`` remove) the perceptual-loss plugin."""
    global _perceptual
    _perceptual = fn


def perceptual_loss_active() -> bool:
    return _perceptual is not None


def _check_same(*imgs):
    shape = np.shape(imgs[0])
    for im in imgs[1:]:
        if np.shape(im) != shape:
            raise ContractViolation(f"shape mismatch: {np.shape(im)} vs {shape}")


def uncertainty_map(img1, img2) -> np.ndarray:
    """Per-pixel, per-channel absolute difference of two renders."""
    _check_same(img1, img2)
    return np.abs(np.asarray(img1, dtype=np.float64) - np.asarray(img2, dtype=np.float64))


def uncertainty_l1(gt, pred, u, lam: float):
    """Uncertainty-weighted L1: ``mean(|gt - pred| * exp(-lam*u) + lam*u)``.

    Returns ``(loss, d loss / d pred, d loss / d u)``.
    """
    _check_same(gt, pred, u)
    if lam < 0:
        raise ContractViolation(f"lambda must be >= 0, got {lam}")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n = diff.size
    weight = np.exp(-lam * u)
    weighted = np.abs(diff) * weight
    loss = float(np.mean(weighted + lam * u)) if n else 0.0
    grad_pred = np.sign(diff) * weight / n
    grad_u = lam * (1.0 - weighted) / n
    return loss, grad_pred, grad_u


def _gauss_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-(x ** 2) / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


_WINDOW = _gauss_window()


def _blur(x: np.ndarray) -> np.ndarray:
    # zero padding; the filter is symmetric, so this op is its own adjoint
    y = correlate1d(x, _WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, _WINDOW, axis=1, mode="constant", cval=0.0)


def ssim(a, b, *, return_grad: bool = False):
    """Mean SSIM over pixels and channels, 11x11 Gaussian window (sigma 1.5).

    With ``return_grad`` also returns d SSIM / d b.
    """
    _check_same(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    flat = a.ndim == 2
    if flat:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ContractViolation(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}px SSIM window")
    mu_a = _blur(a)
    mu_b = _blur(b)
    e_aa = _blur(a * a)
    e_bb = _blur(b * b)
    e_ab = _blur(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num1 = 2.0 * mu_a * mu_b + SSIM_C1
    num2 = 2.0 * cov + SSIM_C2
    den1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    den2 = var_a + var_b + SSIM_C2
    smap = num1 * num2 / (den1 * den2)
    value = float(smap.mean())
    if not return_grad:
        return value
    n = smap.size
    den = den1 * den2
    d_mu_b = (2.0 * mu_a * num2 - 2.0 * mu_a * num1 - 2.0 * mu_b * smap * den2 + 2.0 * mu_b * smap * den1) / den
    d_e_bb = -smap / den2
    d_e_ab = 2.0 * num1 / den
    grad = (_blur(d_mu_b) + 2.0 * b * _blur(d_e_bb) + a * _blur(d_e_ab)) / n
    return value, grad[..., 0] if flat else grad


def d_ssim(gt, pred1, pred2) -> float:
    """``(1 - SSIM(gt, pred1)) + (1 - SSIM(gt, pred2))``."""
    _check_same(gt, pred1, pred2)
    return (1.0 - ssim(gt, pred1)) + (1.0 - ssim(gt, pred2))


@dataclass
class LossBreakdown:
    """Scalar parts of the total objective.

    ``l1_u_others`` carries the pixel terms of models beyond the second
    (ensemble ablation only).
    """

    l1_u_model1: float
    l1_u_model2: float
    d_ssim: float
    lpips: float
    total: float
    l1_u_others: tuple = ()

    def to_dict(self) -> dict:
        return {
            "l1_u_model1": self.l1_u_model1,
            "l1_u_model2": self.l1_u_model2,
            "d_ssim": self.d_ssim,
            "lpips": self.lpips,
            "total": self.total,
        }


def _perceptual_term(gt, pred, lam_l):
    if _perceptual is None or lam_l == 0.0:
        return 0.0, None
    value, grad = _perceptual(gt, pred)
    return float(value), np.asarray(grad, dtype=np.float64)


def total_loss(gt, pred1, pred2, lam: float = 5.0, lam_s: float = 0.2, lam_l: float = 0.5, *,
               detach_uncertainty_weight: bool = False):
    """Dual-model objective with the uncertainty map computed from the two renders.

    Returns ``(breakdown, grad_pred1, grad_pred2, u)``.  Gradients reach both
    renders through the pixel residuals and through ``u = |pred1 - pred2|``;
    ``detach_uncertainty_weight`` drops the path through ``exp(-lam*u)``.
    """
    _check_same(gt, pred1, pred2)
    if min(lam, lam_s, lam_l) < 0:
        raise ContractViolation("loss weights must be >= 0")
    gt = np.asarray(gt, dtype=np.float64)
    pred1 = np.asarray(pred1, dtype=np.float64)
    pred2 = np.asarray(pred2, dtype=np.float64)
    u = uncertainty_map(pred1, pred2)
    l1a, gpa, gua = uncertainty_l1(gt, pred1, u, lam)
    l1b, gpb, gub = uncertainty_l1(gt, pred2, u, lam)
    if detach_uncertainty_weight:
        n = u.size
        gua = np.full(u.shape, lam / n)
        gub = gua
    du = np.sign(pred1 - pred2)
    g_u = (gua + gub) * du
    s1, gs1 = ssim(gt, pred1, return_grad=True)
    s2, gs2 = ssim(gt, pred2, return_grad=True)
    dssim = (1.0 - s1) + (1.0 - s2)
    p1, gp1 = _perceptual_term(gt, pred1, lam_l)
    p2, gp2 = _perceptual_term(gt, pred2, lam_l)
    lpips = p1 + p2
    total = (1.0 - lam_s) * (l1a + l1b) + lam_s * dssim + lam_l * lpips
    grad1 = (1.0 - lam_s) * (gpa + g_u) - lam_s * gs1
    grad2 = (1.0 - lam_s) * (gpb - g_u) - lam_s * gs2
    if gp1 is not None:
        grad1 = grad1 + lam_l * gp1
        grad2 = grad2 + lam_l * gp2
    return LossBreakdown(l1a, l1b, dssim, lpips, total), grad1, grad2, u


def ensemble_total_loss(gt, preds, lam: float = 5.0, lam_s: float = 0.2, lam_l: float = 0.5):
    """K-model generalisation: ``u`` is the per-entry population std of the renders.

    Returns ``(breakdown, [grad_k], u)``.
    """
    _check_same(gt, *preds)
    gt = np.asarray(gt, dtype=np.float64)
    stack = np.stack([np.asarray(p, dtype=np.float64) for p in preds])
    k = len(stack)
    mean = stack.mean(axis=0)
    u = np.sqrt(np.mean((stack - mean) ** 2, axis=0))
    safe = np.where(u > 0, u, 1.0)
    terms, g_preds, g_u = [], [], np.zeros_like(u)
    for p in stack:
        l1, gp, gu = uncertainty_l1(gt, p, u, lam)
        terms.append(l1)
        g_preds.append(gp)
        g_u += gu
    grads, dssim, lpips = [], 0.0, 0.0
    for p, gp in zip(stack, g_preds):
        du = np.where(u > 0, (p - mean) / (k * safe), 0.0)
        s, gs = ssim(gt, p, return_grad=True)
        pl, gpl = _perceptual_term(gt, p, lam_l)
        dssim += 1.0 - s
        lpips += pl
        g = (1.0 - lam_s) * (gp + g_u * du) - lam_s * gs
        if gpl is not None:
            g = g + lam_l * gpl
        grads.append(g)
    total = (1.0 - lam_s) * sum(terms) + lam_s * dssim + lam_l * lpips
    second = terms[1] if k > 1 else 0.0
    return LossBreakdown(terms[0], second, dssim, lpips, total, tuple(terms[2:])), grads, u


def baseline_loss(gt, pred, lam_s: float = 0.2, lam_l: float = 0.5):
    """Single-model ``(1 - lam_s) L1 + lam_s (1 - SSIM)`` (+ perceptual hook).

    Returns ``(breakdown, grad_pred)``.
    """
    _check_same(gt, pred)
    l1, gp, _ = uncertainty_l1(gt, pred, np.zeros(np.shape(pred)), 0.0)
    s, gs = ssim(gt, pred, return_grad=True)
    pl, gpl = _perceptual_term(gt, pred, lam_l)
    total = (1.0 - lam_s) * l1 + lam_s * (1.0 - s) + lam_l * pl
    grad = (1.0 - lam_s) * gp - lam_s * gs
    if gpl is not None:
        grad = grad + lam_l * gpl
    return LossBreakdown(l1, 0.0, 1.0 - s, pl, total), grad


def variance_loss(gt, pred, u, lam: float = 5.0, lam_s: float = 0.2, lam_l: float = 0.5):
    """Single model with a rendered uncertainty map (learnable-variance ablation).

    ``u`` is (H, W) or (H, W, 3); returns ``(breakdown, grad_pred, grad_u)``
    with ``grad_u`` shaped like ``u``.
    """
    u = np.asarray(u, dtype=np.float64)
    u3 = np.broadcast_to(u[..., None] if u.ndim == 2 else u, np.shape(pred))
    l1, gp, gu = uncertainty_l1(gt, pred, u3, lam)
    s, gs = ssim(gt, pred, return_grad=True)
    pl, gpl = _perceptual_term(gt, pred, lam_l)
    total = (1.0 - lam_s) * l1 + lam_s * (1.0 - s) + lam_l * pl
    grad = (1.0 - lam_s) * gp - lam_s * gs
    if gpl is not None:
        grad = grad + lam_l * gpl
    grad_u = (1.0 - lam_s) * gu
    if u.ndim == 2:
        grad_u = grad_u.sum(axis=2)
    return LossBreakdown(l1, 0.0, 1.0 - s, pl, total), grad, grad_u


def normalize_uncertainty_for_viz(u) -> np.ndarray:
    """Channel-mean grayscale map min-max scaled to [0, 1]; constant maps give zeros."""
    u = np.asarray(u, dtype=np.float64)
    gray = u.mean(axis=2) if u.ndim == 3 else u
    lo, hi = gray.min(), gray.max()
    if not hi > lo:
        return np.zeros_like(gray)
    return (gray - lo) / (hi - lo)
