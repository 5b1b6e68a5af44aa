"""Figures written next to the CSV/JSON results of a run or sweep."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy_matrix(matrix: np.ndarray, path) -> Path:
    """Heatmap of R[l][j] in percent; the empty upper triangle is left blank."""
    R = np.asarray(matrix, dtype=float)
    K = R.shape[0]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(0.6 * K + 2.2, 0.6 * K + 1.6))
        im = ax.imshow(np.ma.masked_invalid(100 * R), vmin=0, vmax=100, cmap="viridis")
        for l in range(K):
            for j in range(l + 1):
                if np.isfinite(R[l, j]):
                    ax.text(j, l, f"{100 * R[l, j]:.1f}", ha="center", va="center", fontsize=7,
                            color="white" if R[l, j] < 0.6 else "black")
        ax.set_xticks(range(K), [str(j + 1) for j in range(K)])
        ax.set_yticks(range(K), [str(l + 1) for l in range(K)])
        ax.set_xlabel("evaluated task")
        ax.set_ylabel("after training task")
        fig.colorbar(im, ax=ax, label="accuracy (%)")
        return _save(fig, path)


def plot_loss_curves(history: list[dict], path) -> Path:
    """Per-epoch loss terms over the whole sequence, with task boundaries marked."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(1, len(history) + 1)
        for key in ("L_hm", "L_sm", "L_sp", "total"):
            ax.plot(x, [h[key] for h in history], label=key, lw=1.2)
        tasks = [h["task"] for h in history]
        for i in range(1, len(tasks)):
            if tasks[i] != tasks[i - 1]:
                ax.axvline(i + 0.5, color="0.8", lw=0.8, zorder=0)
        ax.set_xlabel("epoch (cumulative)")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def plot_sweep(axis: str, rows: list[dict], path) -> Path:
    """AA and FM (percent) for each sweep value."""
    labels = [str(r["axis_value"]) for r in rows]
    x = np.arange(len(rows))
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        a1.bar(x, [r["AA_percent"] for r in rows], color="tab:blue")
        a2.bar(x, [r["FM_percent"] for r in rows], color="tab:red")
        for ax, name in ((a1, "AA (%)"), (a2, "FM (%)")):
            ax.set_xticks(x, labels)
            ax.set_xlabel(axis)
            ax.set_ylabel(name)
        return _save(fig, path)
