"""Matplotlib figures written next to CLI reports (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import ABReport, EvalReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_eval(report: EvalReport, path) -> Path:
    az = [c["azimuth"] for c in report.cameras]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(az, report.psnr, "o-", ms=3)
    ax1.axhline(report.psnr_mean, color="k", lw=0.8, ls="--")
    ax1.set(xlabel="azimuth (deg)", ylabel="PSNR (dB)", title="held-out PSNR")
    ax2.plot(az, report.ssim, "o-", ms=3, color="tab:green")
    ax2.axhline(report.ssim_mean, color="k", lw=0.8, ls="--")
    ax2.set(xlabel="azimuth (deg)", ylabel="SSIM", title="held-out SSIM")
    return _save(fig, path)


def plot_ab(ab: ABReport, path) -> Path:
    flat = np.concatenate([np.asarray(d, dtype=float) for d in ab.ssim_deltas])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.hist(flat, bins=30, color="tab:blue")
    ax1.axvline(0.0, color="k", lw=0.8)
    ax1.set(xlabel="SSIM(A) - SSIM(B)", ylabel="views",
            title=f"wins {ab.wins} / losses {ab.losses}, p={ab.p_value:.2g}")
    ax2.bar(range(len(ab.seed_mean_ssim_deltas)), ab.seed_mean_ssim_deltas, color="tab:orange")
    ax2.axhline(0.0, color="k", lw=0.8)
    ax2.set(xlabel="run pair", ylabel="mean SSIM delta", title="per-run mean delta")
    return _save(fig, path)


def plot_training(records: list[dict], path) -> Path:
    it = [r["iteration"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("total", "l1_u_model1", "l1_u_model2", "d_ssim"):
        vals = [r["loss"].get(key, np.nan) for r in records]
        if np.any(np.asarray(vals, dtype=float) != 0):
            ax1.plot(it, vals, lw=0.7, label=key)
    ax1.set(xlabel="iteration", ylabel="loss", yscale="log", title="training loss")
    ax1.legend(fontsize=7)
    counts = np.array([r["points"] for r in records])
    for k in range(counts.shape[1] if counts.ndim == 2 else 0):
        ax2.plot(it, counts[:, k], label=f"model {k + 1}")
    ax2.set(xlabel="iteration", ylabel="points", title="point count")
    ax2.legend(fontsize=7)
    return _save(fig, path)
