"""Delimited reports and their companion figures.

Every reporting path writes a tab-separated table and renders a matplotlib
figure next to it, so runs are inspectable without loading the library.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def write_tsv(path, columns, rows, comments=()):
    """Write a tab-separated table; comment lines are prefixed with '#'."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")
    return path


def save_loss_curve(log_rows, path):
    """Training loss per iteration on a log scale."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    losses = [r.loss for r in log_rows]
    ax.plot(range(1, len(losses) + 1), losses, lw=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_eval_bars(names, noisy_psnr, denoised_psnr, path):
    """Per-image PSNR before and after denoising."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(names) + 2), 3.5))
    idx = range(len(names))
    width = 0.4
    ax.bar([i - width / 2 for i in idx], noisy_psnr, width, label="noisy")
    ax.bar([i + width / 2 for i in idx], denoised_psnr, width, label="denoised")
    ax.set_xticks(list(idx))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_ablation_chart(labels, psnr_values, path):
    """Horizontal bars comparing the ablation variants."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 0.45 * len(labels) + 1.5))
    ypos = range(len(labels))
    ax.barh(list(ypos), psnr_values)
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("mean PSNR (dB)")
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
