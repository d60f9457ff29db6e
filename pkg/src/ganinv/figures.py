"""Matplotlib report figures written next to the delimited outputs.

Every figure function takes already-computed data (a TrainHistory or a
MetricReport), renders with the Agg backend, writes a PNG, and returns
the path. Nothing here computes metrics.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractViolation

METRIC_KEYS = ("psnr", "ssim", "mse_e2", "lpips", "cs")


def loss_curve_figure(history, path: str) -> str:
    """Total loss and reconstruction MSE against the training step."""
    if not history.records:
        raise ContractViolation("cannot plot an empty training history")
    steps = [r["step"] for r in history.records]
    totals = [r["total"] for r in history.records]
    recon = [r["recon_mse"] for r in history.records]

    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    axes[0].plot(steps, totals, lw=1.0, color="tab:blue")
    axes[0].set_ylabel("total loss")
    axes[0].set_yscale("log")
    axes[0].grid(True, alpha=0.3)
    axes[1].plot(steps, recon, lw=1.0, color="tab:orange")
    axes[1].set_ylabel("reconstruction MSE")
    axes[1].set_xlabel("step")
    axes[1].set_yscale("log")
    axes[1].grid(True, alpha=0.3)
    fig.suptitle("Training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def metric_bar_figure(report, path: str) -> str:
    """Per-pair bars for each report metric, mean drawn as a line."""
    if not report.rows:
        raise ContractViolation("cannot plot an empty metric report")
    ids = [str(r["id"]) for r in report.rows]
    x = np.arange(len(ids))

    fig, axes = plt.subplots(len(METRIC_KEYS), 1,
                             figsize=(max(6, 0.35 * len(ids) + 2), 10), sharex=True)
    for ax, key in zip(axes, METRIC_KEYS):
        values = np.array([r[key] for r in report.rows], dtype=float)
        finite = np.isfinite(values)
        ax.bar(x[finite], values[finite], color="tab:blue", width=0.7)
        # Infinite PSNR (exact matches) marked instead of plotted.
        for xi in x[~finite]:
            ax.annotate("inf", (xi, 0), ha="center", va="bottom", color="tab:red")
        mean = report.aggregate[key]
        if math.isfinite(mean):
            ax.axhline(mean, color="tab:orange", lw=1.0, ls="--",
                       label=f"mean {mean:.4g}")
            ax.legend(loc="upper right", fontsize=8)
        ax.set_ylabel(key)
        ax.grid(True, axis="y", alpha=0.3)
    axes[-1].set_xticks(x)
    axes[-1].set_xticklabels(ids, rotation=90, fontsize=7)
    fig.suptitle("Per-pair metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def inversion_panel_figure(targets, reconstructions, metrics: dict, path: str) -> str:
    """Target/reconstruction pairs side by side with per-image MSE labels."""
    n = targets.shape[0]
    if n == 0 or reconstructions.shape != targets.shape:
        raise ContractViolation("inversion panel needs matching non-empty batches")
    cols = min(n, 8)
    rows = 2 * math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.7 * rows), squeeze=False)
    for ax_row in axes:
        for ax in ax_row:
            ax.axis("off")
    for i in range(n):
        block, col = divmod(i, cols)
        top = axes[2 * block][col]
        bottom = axes[2 * block + 1][col]
        top.imshow(((targets[i].detach().clamp(-1, 1) + 1) / 2).permute(1, 2, 0).numpy())
        top.set_title(f"target {i}", fontsize=7)
        bottom.imshow(((reconstructions[i].detach().clamp(-1, 1) + 1) / 2)
                      .permute(1, 2, 0).numpy())
        bottom.set_title(f"mse {metrics['mse'][i]:.4f}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
