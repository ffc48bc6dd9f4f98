"""Figure rendering for the command-line reports.

Everything draws through the Agg backend straight to files, so the CLI can
run headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .hints import Heatmap  # noqa: E402


def save_history_figure(history, path) -> None:
    """Loss and validation curves over epochs."""
    epochs = [row.epoch for row in history]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(epochs, [row.total_loss for row in history], label="total")
    axes[0].plot(epochs, [row.l_a for row in history], label="attribute")
    axes[0].plot(epochs, [row.l_i for row in history], label="pairwise")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].set_title("training loss")
    axes[1].plot(epochs, [row.val_precision for row in history], label="P@k")
    axes[1].plot(epochs, [row.val_ndcg for row in history], label="NDCG@10")
    axes[1].legend()
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("validation metric")
    axes[1].set_title("model selection")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_figure(table, path) -> None:
    """Grouped bars: one group per level, one bar pair per cutoff."""
    levels = sorted({row.level for row in table.rows})
    ks = sorted({row.k for row in table.rows})
    width = 0.8 / max(len(ks), 1)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, metric in zip(axes, ("precision", "ndcg")):
        for j, k in enumerate(ks):
            vals = [getattr(table.get(level, k), metric) for level in levels]
            xs = np.arange(len(levels)) + j * width
            ax.bar(xs, vals, width=width, label=f"@{k}")
        ax.set_xticks(np.arange(len(levels)) + 0.4 - width / 2)
        ax.set_xticklabels([f"level {level}" for level in levels])
        ax.set_ylabel(metric)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_figure(hm: Heatmap, title: str, path) -> None:
    norm = hm.normalized()
    n_rows = max(len(hm.row_labels), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(hm.col_labels),
                                    1.0 + 0.5 * n_rows))
    im = ax.imshow(norm, cmap="YlOrRd", vmin=0.0, vmax=1.0, aspect="auto")
    ax.set_xticks(range(len(hm.col_labels)))
    ax.set_xticklabels(hm.col_labels, rotation=45, ha="right")
    ax.set_yticks(range(len(hm.row_labels)))
    ax.set_yticklabels(hm.row_labels)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(summary, k: int, path) -> None:
    """NDCG@k per level, one bar per variant.

    `summary` maps variant name to the aggregated rows produced by the
    evaluation module (one dict per level/cutoff with mean and std).
    """
    variants = sorted(summary)
    levels = sorted({row["level"] for rows in summary.values() for row in rows
                     if row["k"] == k})
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(8, 4))
    for j, name in enumerate(variants):
        by_level = {row["level"]: row for row in summary[name] if row["k"] == k}
        means = [by_level[level]["ndcg_mean"] for level in levels]
        stds = [by_level[level]["ndcg_std"] for level in levels]
        xs = np.arange(len(levels)) + j * width
        ax.bar(xs, means, width=width, yerr=stds, capsize=3, label=name)
    ax.set_xticks(np.arange(len(levels)) + 0.4 - width / 2)
    ax.set_xticklabels([f"level {level}" for level in levels])
    ax.set_ylabel(f"NDCG@{k}")
    ax.set_title("variant comparison")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
