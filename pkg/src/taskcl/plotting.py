"""Static report figures (PNG) for heatmaps, projections, ablations and training curves."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# PNG metadata without software/version stamps keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_heatmap(matrix, clusters: Sequence, domains: Sequence, path: Path, title: str = "Cluster/domain assignment") -> Path:
    M = np.asarray(matrix)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.7 * len(domains), 1.0 + 0.55 * len(clusters)))
        im = ax.imshow(M, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(domains)), [str(d) for d in domains], rotation=30, ha="right")
        ax.set_yticks(range(len(clusters)), [str(c) for c in clusters])
        ax.set_xlabel("domain")
        ax.set_ylabel("cluster")
        for (i, j), v in np.ndenumerate(M):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w" if v < 0.6 else "k", fontsize=7)
        fig.colorbar(im, ax=ax, fraction=0.05)
        ax.set_title(title)
        return _save(fig, path)


def plot_projection(coords, labels: Sequence, path: Path, title: str = "Task embeddings (PCA)") -> Path:
    C = np.asarray(coords)
    labels = list(labels)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.4))
        for lab in sorted(set(labels)):
            m = np.array([l == lab for l in labels])
            ax.scatter(C[m, 0], C[m, 1], s=9, alpha=0.75, label=str(lab))
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(frameon=False, markerscale=1.5)
        ax.set_title(title)
        return _save(fig, path)


def plot_training_curve(records: Sequence[Mapping], path: Path) -> Path:
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 3.0))
        for key, label in (("episodic", "episodic"), ("L_con", "L_con"), ("L_clu", "L_clu"), ("L_sup", "L_sup")):
            vals = [r.get(key, 0.0) for r in records]
            if any(v != 0.0 for v in vals):
                ax.plot(steps, _smooth(vals), lw=1.0, label=label)
        ax.set_xlabel("meta step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def _smooth(v, window: int = 20):
    v = np.asarray(v, dtype=float)
    if v.size < window:
        return v
    k = np.ones(window) / window
    head = np.cumsum(v[: window - 1]) / np.arange(1, window)
    return np.concatenate([head, np.convolve(v, k, mode="valid")])


def plot_ablation(rows: Sequence[Mapping], path: Path) -> Path:
    names = [r["strategy"] for r in rows]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0))
        axes[0].bar(x, [r["db"] for r in rows], color="tab:blue")
        axes[0].set_ylabel("Davies-Bouldin (lower is better)")
        axes[1].bar(x, [r["probe"] for r in rows], color="tab:green")
        axes[1].set_ylabel("linear probe accuracy")
        axes[1].set_ylim(0, 1)
        for ax in axes:
            ax.set_xticks(x, names, rotation=35, ha="right")
        fig.tight_layout()
        return _save(fig, path)
