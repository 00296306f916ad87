"""Figure rendering for run artifacts.

The delimited files are the contract; these plots are a reading aid
written next to them and can be switched off per run.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["trace_figure", "solution_figure", "lemma_figure"]

_QS = (0.05, 0.25, 0.5, 0.75, 0.95)


def trace_figure(rows, path: str) -> str:
    """Semilog decay of the Picard distances per iteration."""
    its = [r.iteration for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.semilogy(its, [max(r.y_dist_sup, 1e-300) for r in rows],
                marker="o", label="sup |Y gap|")
    ax.semilogy(its, [max(r.z_dist_bmo, 1e-300) for r in rows],
                marker="s", label="BMO |Z gap|")
    bad = [r.iteration for r in rows if not math.isnan(r.ratio) and r.ratio >= 1.0]
    for it in bad:
        ax.axvline(it, color="crimson", alpha=0.25, lw=4)
    ax.set_xlabel("iteration")
    ax.set_ylabel("distance")
    ax.set_title("fixed-point iteration decay")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def solution_figure(times, y: np.ndarray, path: str) -> str:
    """Quantile fan of each value component over time."""
    times = np.asarray(times, dtype=float)
    n = y.shape[2]
    fig, axes = plt.subplots(n, 1, figsize=(6.4, 2.6 * n), sharex=True,
                             squeeze=False)
    for i in range(n):
        ax = axes[i, 0]
        qs = np.quantile(y[:, :, i], _QS, axis=1)
        ax.fill_between(times, qs[0], qs[4], alpha=0.18, label="5-95%")
        ax.fill_between(times, qs[1], qs[3], alpha=0.3, label="25-75%")
        ax.plot(times, qs[2], lw=1.2, label="median")
        ax.plot(times, y[:, :, i].mean(axis=1), lw=1.0, ls="--", label="mean")
        ax.set_ylabel(f"Y[{i + 1}]")
        ax.grid(True, alpha=0.3)
        if i == 0:
            ax.legend(loc="best", fontsize=8)
    axes[-1, 0].set_xlabel("t")
    fig.suptitle("value process fan")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def lemma_figure(entries, path: str) -> str:
    """Horizontal slack bars, one per check; negative slack means failure.

    ``entries`` is a sequence of (label, slack, status) triples.
    """
    labels = [e[0] for e in entries]
    slacks = [e[1] for e in entries]
    colors = ["tab:green" if e[2] == "pass"
              else ("tab:gray" if e[2] == "inapplicable" else "tab:red")
              for e in entries]
    fig, ax = plt.subplots(figsize=(6.4, 0.42 * max(len(entries), 4) + 1.2))
    ax.barh(range(len(entries)), slacks, color=colors)
    ax.axvline(0.0, color="black", lw=1)
    ax.set_yticks(range(len(entries)))
    ax.set_yticklabels(labels, fontsize=8)
    ax.set_xlabel("slack (bound minus estimate)")
    ax.set_title("martingale checks")
    ax.grid(True, axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
