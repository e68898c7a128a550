"""Figures written next to the CSVs they are drawn from."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def learning_curves(runs: dict[str, list[dict]], path) -> Path:
    """Median (solid) and mean (dashed) final L1 distance against env steps, one colour per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.4))
        for i, (label, rows) in enumerate(sorted(runs.items())):
            if not rows:
                continue
            x = [r["env_steps"] for r in rows]
            color = f"C{i % 10}"
            ax.plot(x, [r["median_final_L1"] for r in rows], color=color, label=label)
            ax.plot(x, [r["mean_final_L1"] for r in rows], color=color, ls="--", lw=0.8)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("final L1 goal distance")
        ax.set_ylim(bottom=0)
        if sum(bool(rows) for rows in runs.values()) > 1:
            ax.legend()
        return _save(fig, path)


def trajectory_analysis(rows: list[dict], path) -> Path:
    """Q, latent distance, pixel distance and position distance along one episode."""
    t = [r["t"] for r in rows]
    panels = [("q_value", "Q(o_t, a_t, g)"), ("embed_distance", "latent distance"),
              ("pixel_l1", "pixel L1"), ("position_l1", "position L1")]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(11, 2.6), sharex=True)
        for ax, (key, title) in zip(axes, panels):
            ax.plot(t, [r[key] for r in rows], marker=".", ms=3, lw=1)
            ax.set_title(title)
            ax.set_xlabel("t")
        return _save(fig, path)


def embedding_map(positions: np.ndarray, embeddings: np.ndarray, path) -> Path:
    """First two principal components of the embedding, coloured by each position coordinate."""
    z = embeddings - embeddings.mean(axis=0)
    if z.shape[1] >= 2:
        _, _, vt = np.linalg.svd(z, full_matrices=False)
        pc = z @ vt[:2].T
    else:
        pc = np.column_stack([z[:, 0], np.zeros(len(z))])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7, 3.2))
        for k, ax in enumerate(axes):
            sc = ax.scatter(pc[:, 0], pc[:, 1], c=positions[:, k], s=14, cmap="viridis")
            fig.colorbar(sc, ax=ax, label=f"position[{k}]")
            ax.set_xlabel("pc 1")
            ax.set_ylabel("pc 2")
        return _save(fig, path)
