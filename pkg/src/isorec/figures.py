"""Render metric and ablation reports to image files next to their CSVs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport

__all__ = ["save_metrics_figure", "save_ablation_figure", "save_loss_figure"]


def _finite(values):
    return [v for v in values if math.isfinite(v)]


def save_metrics_figure(report: MetricReport, path):
    """Per-slice PSNR and SSIM curves with their volume-level summaries."""
    ids = [s.slice_id for s in report.slices]
    psnrs = [s.psnr_db for s in report.slices]
    ssims = [s.ssim for s in report.slices]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax0.plot(ids, psnrs, marker="o", ms=3, lw=1)
    ax0.set_xlabel("slice")
    ax0.set_ylabel("PSNR [dB]")
    finite = _finite(psnrs)
    if finite:
        ax0.set_title(f"volume PSNR {report.psnr_db:.2f} dB" if math.isfinite(report.psnr_db) else "identical volumes")
    ax1.plot(ids, ssims, marker="o", ms=3, lw=1, color="tab:orange")
    ax1.set_xlabel("slice")
    ax1.set_ylabel("SSIM")
    ax1.set_title(f"mean SSIM {report.ssim:.4f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rows: list[dict], path):
    """PSNR against refine count K, one curve per conditioning period."""
    periods = sorted({row["sscs_period"] for row in rows})
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for period in periods:
        sub = sorted((r for r in rows if r["sscs_period"] == period), key=lambda r: r["K"])
        ax.plot(
            [r["K"] for r in sub],
            [r["mean_psnr"] for r in sub],
            marker="o",
            label=f"condition every {period} step(s)",
        )
    ax.set_xscale("log")
    ax.set_xlabel("refinements per step K (fixed total budget)")
    ax.set_ylabel("mean PSNR [dB]")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(losses: list[float], path):
    """Training loss trace with a light running mean."""
    fig, ax = plt.subplots(figsize=(5.2, 3.2))
    ax.plot(losses, lw=0.6, alpha=0.5, label="per step")
    if len(losses) >= 20:
        window = max(len(losses) // 50, 5)
        smooth = [
            sum(losses[max(0, i - window) : i + 1]) / len(losses[max(0, i - window) : i + 1])
            for i in range(len(losses))
        ]
        ax.plot(smooth, lw=1.5, label=f"running mean ({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
