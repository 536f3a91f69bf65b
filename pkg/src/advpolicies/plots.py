"""Static SVG figures. Presentation only; every plotted number is also written to CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt and no date stamp keep the SVG bytes reproducible
matplotlib.rcParams["svg.hashsalt"] = "advpolicies"
_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def grid_heatmap(grid, path) -> Path:
    """Opponent win-rate heatmap; the best opponent in each row gets a red border."""
    M = grid.matrix() * 100
    fig, ax = plt.subplots(figsize=(1.2 * len(grid.opponents) + 2, 0.6 * len(grid.victims) + 1.5))
    ax.imshow(M, cmap="Blues", vmin=0, vmax=100)
    ax.set_xticks(range(len(grid.opponents)), grid.opponents)
    ax.set_yticks(range(len(grid.victims)), grid.victims)
    ax.set_xlabel("opponent")
    ax.set_ylabel("victim")
    for i in range(M.shape[0]):
        for j in range(M.shape[1]):
            ax.text(j, i, f"{M[i, j]:.0f}", ha="center", va="center", color="white" if M[i, j] > 60 else "black")
        j = int(np.argmax(M[i]))
        ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, edgecolor="red", lw=2))
    ax.set_title(f"opponent win rate (%), n={grid.n_episodes}")
    return _save(fig, path)


def curve_plot(curves: dict, path, baselines: dict | None = None) -> Path:
    """``curves`` maps a label to a list of CurvePoint; ``baselines`` maps a label to a flat rate."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in curves.items():
        steps = np.array([p.step for p in pts])
        ax.plot(steps, [100 * p.win_rate for p in pts], marker="o", label=label)
        ax.fill_between(steps, [100 * p.ci_low for p in pts], [100 * p.ci_high for p in pts], alpha=0.2)
    for label, rate in (baselines or {}).items():
        ax.axhline(100 * rate, ls="--", lw=1, label=label, color="gray")
    ax.set_xlabel("adversary training steps")
    ax.set_ylabel("win rate (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    return _save(fig, path)


def likelihood_bars(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(1.0 * len(rows) + 2, 3.5))
    means = np.array([r.mean_log_likelihood for r in rows])
    err = np.array([[r.mean_log_likelihood - r.ci_low for r in rows], [r.ci_high - r.mean_log_likelihood for r in rows]])
    ax.bar(range(len(rows)), means, yerr=err, capsize=4, color="tab:blue")
    ax.set_xticks(range(len(rows)), [r.label for r in rows], rotation=30, ha="right")
    ax.set_ylabel("mean log-likelihood")
    return _save(fig, path)


def tsne_scatter(coords, labels, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    labels = np.asarray(labels)
    for lab in dict.fromkeys(labels.tolist()):
        sel = labels == lab
        ax.scatter(coords[sel, 0], coords[sel, 1], s=4, label=lab)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(markerscale=3, fontsize=8)
    return _save(fig, path)


def sweep_plot(medians: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    dims = list(medians)
    ax.plot(dims, [100 * medians[d] for d in dims], marker="o")
    ax.set_xlabel("pose dimension")
    ax.set_ylabel("median adversary win rate (%)")
    ax.set_ylim(0, 100)
    return _save(fig, path)
