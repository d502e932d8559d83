"""Figure rendering for run reports (headless Agg backend).

Each renderer takes data the CLI already has on disk in delimited form and
writes a PNG next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .topology import Topology, in_degree


def training_curves(rows: list[dict], path: str) -> None:
    """Loss curves plus the lr schedule from parsed metrics rows."""
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r["train_loss"] for r in rows], marker="o", label="train loss")
    ax.plot(epochs, [r["val_loss"] for r in rows], marker="s", label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (nats)")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["lr"] for r in rows], color="gray", linestyle="--", label="lr")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    lines, labels = ax.get_legend_handles_labels()
    l2, lab2 = ax2.get_legend_handles_labels()
    ax.legend(lines + l2, labels + lab2, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def attention_heatmap(alphas: np.ndarray, tokens: list[str], path: str, layer: int = 0) -> None:
    """Channel-weight heatmap over a sentence: alphas is (T, K)."""
    t, k = alphas.shape
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * t), 1.2 + 0.6 * k))
    im = ax.imshow(alphas.T, aspect="auto", cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_yticks(range(k), [f"channel {i + 1}" for i in range(k)])
    labels = [tok if tok.strip() else repr(tok) for tok in tokens]
    ax.set_xticks(range(t), labels, rotation=45, ha="right")
    ax.set_xlabel("step")
    ax.set_title(f"per-step channel weights (layer {layer})")
    fig.colorbar(im, ax=ax, label="weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def topology_figure(topo: Topology, steps: int, path: str) -> None:
    """In-degree pattern per channel over time; shows the staggered cycle."""
    ks = list(range(1, topo.channels + 1))
    fig, axes = plt.subplots(len(ks), 1, figsize=(8, 1.3 * len(ks) + 1), sharex=True, squeeze=False)
    ts = np.arange(1, steps + 1)
    for ax, k in zip(axes[:, 0], ks):
        degs = [in_degree(topo, k, int(t)) for t in ts]
        ax.step(ts, degs, where="mid")
        ax.set_ylabel(f"ch {k}")
        ax.set_yticks(range(1, topo.n))
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("step t")
    axes[0, 0].set_title(f"in-degree cycle, block size n={topo.n}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
