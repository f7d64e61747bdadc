"""PNG renderings of the delimited outputs.

Every figure here mirrors a CSV or PGM artifact written next to it; the
files are the record, the pictures are for eyeballs.  The Agg backend
keeps rendering headless.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_curve_png", "save_field_png", "save_history_png"]


def save_field_png(path, image, lo=None, hi=None, title=""):
    """Render a (ny, nx) bottom-up field to a PNG heatmap."""
    image = np.asarray(image, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    im = ax.imshow(image, origin="lower", cmap="viridis", vmin=lo, vmax=hi, interpolation="nearest")
    fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title)
    ax.set_xlabel("element x")
    ax.set_ylabel("element y")
    return _save(fig, path)


def save_curve_png(path, x, series, xlabel="", ylabel="", marks=(), title=""):
    """Line plot of one or more named series over a shared abscissa.

    marks is an iterable of x positions to flag with vertical lines
    (used for detected local minima).
    """
    x = np.asarray(x, dtype=float)
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    for name, values in series.items():
        ax.plot(x, np.asarray(values, dtype=float), label=name, linewidth=1.2)
    for mx in marks:
        ax.axvline(float(mx), color="crimson", linestyle="--", linewidth=0.9)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def save_history_png(path, history):
    """Objective and worst constraint against the accepted-step index."""
    iters = [r.iteration for r in history.records]
    objective = [r.objective for r in history.records]
    maxc = [r.max_constraint for r in history.records]
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    ax.plot(iters, objective, color="tab:blue", linewidth=1.4, label="objective")
    ax.set_xlabel("accepted step")
    ax.set_ylabel("objective", color="tab:blue")
    ax.grid(True, alpha=0.3)
    if np.isfinite(maxc).any():
        ax2 = ax.twinx()
        ax2.plot(iters, maxc, color="tab:red", linewidth=1.1, label="max constraint")
        ax2.axhline(0.0, color="tab:red", linestyle=":", linewidth=0.8)
        ax2.set_ylabel("max constraint", color="tab:red")
    return _save(fig, path)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
