"""Figures written next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(rows, path) -> None:
    """Aggregation time vs. number of edge devices, in milliseconds."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = [r.devices for r in rows]
    ax.plot(xs, [1e3 * r.mean_seconds for r in rows], marker="o", label="mean")
    ax.plot(xs, [1e3 * r.min_seconds for r in rows], marker=".", ls="--", label="min")
    ax.set_xlabel("Edge devices")
    ax.set_ylabel("Aggregation time (ms)")
    ax.set_xticks(xs)
    ax.grid(True, ls=":", alpha=0.6)
    ax.legend(loc="upper left", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_learning_curve(metrics, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    rounds = [m.round for m in metrics]
    ax.plot(rounds, [m.test_accuracy for m in metrics], marker="o", label="global test")
    mean_local = [sum(m.cluster_accuracy) / len(m.cluster_accuracy) for m in metrics]
    ax.plot(rounds, mean_local, ls="--", label="mean local train")
    aborted = [m.round for m in metrics if not m.committed]
    if aborted:
        ax.scatter(aborted, [0.0] * len(aborted), marker="x", color="C3", label="aborted round")
    ax.set_xlabel("Round")
    ax.set_ylabel("Accuracy")
    ax.set_ylim(-0.05, 1.05)
    ax.grid(True, ls=":", alpha=0.6)
    ax.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
