"""Figures written next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def training_curves(rows, path, title: str = "") -> Path:
    """PSNR against step; solid test, dashed train."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for split, style in (("test", "-"), ("train", "--")):
        pts = [(r["step"], r["psnr"]) for r in rows if r["split"] == split]
        if pts:
            s, p = zip(*pts)
            ax.plot(s, p, style, label=split)
    ax.set_xlabel("step")
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def compare_curves(runs: dict, path, split: str = "test") -> Path:
    """One line per named run (``name -> metric rows``)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, rows in runs.items():
        pts = [(r["step"], r["psnr"]) for r in rows if r["split"] == split]
        if pts:
            s, p = zip(*pts)
            ax.plot(s, p, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel(f"{split} PSNR (dB)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def matrix_heatmap(M: np.ndarray, path, title: str = "", boundaries=(), cmap: str = "RdBu_r",
                   symmetric: bool = True) -> Path:
    """Heatmap of a matrix; ``boundaries`` draws block separators."""
    M = np.asarray(M, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    if symmetric:
        lim = float(np.abs(M).max()) or 1.0
        im = ax.imshow(M, cmap=cmap, vmin=-lim, vmax=lim, interpolation="nearest")
    else:
        im = ax.imshow(M, cmap=cmap, interpolation="nearest")
    for b in boundaries:
        ax.axhline(b - 0.5, color="k", lw=0.4)
        ax.axvline(b - 0.5, color="k", lw=0.4)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def view_heatmap(M: np.ndarray, path, title: str = "") -> Path:
    return matrix_heatmap(M, path, title, cmap="viridis", symmetric=False)
