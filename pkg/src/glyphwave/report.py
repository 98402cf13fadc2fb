"""Matplotlib figures rendered next to the experiment CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import DiversityResult, RepetitionResult, StretchResult


def plot_repetition(result: RepetitionResult, out_path: str | Path) -> Path:
    """Mean relative duration vs repeat count, one panel per level."""
    levels = sorted({row[1] for row in result.rows})
    fig, axes = plt.subplots(1, len(levels), figsize=(5.0 * len(levels), 3.6))
    if len(levels) == 1:
        axes = [axes]
    for ax, level in zip(axes, levels):
        for system, style in (("augmented", "o-"), ("no_augmentation", "s--")):
            pts = result.means(system, level)
            if not pts:
                continue
            ks = [p[0] for p in pts]
            means = [p[1] for p in pts]
            stds = [next(r[4] for r in result.rows
                         if r[0] == system and r[1] == level and r[2] == k) for k in ks]
            ax.errorbar(ks, means, yerr=stds, fmt=style, capsize=3, label=system)
        ax.set_title(f"{level}-level repetition")
        ax.set_xlabel("repeat count")
        ax.set_ylabel("relative duration")
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_stretch(result: StretchResult, out_path: str | Path) -> Path:
    """Measured relative duration vs stretch ratio with the fitted line."""
    ratios = [row[0] for row in result.rows]
    means = [row[1] for row in result.rows]
    stds = [row[2] for row in result.rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.errorbar(ratios, means, yerr=stds, fmt="o", capsize=3, label="measured")
    xs = np.linspace(min(ratios), max(ratios), 50)
    intercept = result.meta.get("intercept", 0.0)
    ax.plot(xs, result.slope * xs + intercept, "--",
            label=f"fit: slope={result.slope:.2f}, R2={result.r2:.3f}")
    ax.set_xlabel("stretch ratio")
    ax.set_ylabel("relative duration")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_diversity(result: DiversityResult, out_path: str | Path) -> Path:
    """Violin of per-pair squared distances for each conditioning system."""
    systems = ["image", "label"]
    data = [[row[3] for row in result.pair_rows if row[0] == system]
            for system in systems]
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    parts = ax.violinplot(data, showmeans=True)
    for body in parts["bodies"]:
        body.set_alpha(0.6)
    ax.set_xticks([1, 2])
    ax.set_xticklabels([f"image\n(MSD={result.msd_image:.3f})",
                        f"label\n(MSD={result.msd_label:.3f})"])
    ax.set_ylabel("pairwise squared mel distance")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
