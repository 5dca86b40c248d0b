"""Static figures rendered next to the CSV outputs.

Figures are written with the non-interactive Agg backend so the CLI works on
headless machines.  Every plot is a pure function of rows already written to
CSV; nothing here feeds back into the numbers.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def figsize(fraction=1.0, ratio=None, width_in=6.0):
    ratio = ratio or (np.sqrt(5.0) - 1.0) / 2.0
    w = width_in * fraction
    return (w, w * ratio)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_schedule(rows, path):
    """Sparsity against step for ``rows`` of ``{"step", "sparsity"}``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        t = [r["step"] for r in rows]
        s = [r["sparsity"] for r in rows]
        ax.step(t, s, where="post", color="C0")
        ax.plot(t, s, "o", ms=3, color="C0")
        ax.set_xlabel("training step")
        ax.set_ylabel("sparsity")
        ax.set_ylim(-0.02, 1.02)
        return _save(fig, path)


def plot_trace(trace, path, metric_name="metric"):
    """Three stacked panels: sparsity, learning rate and the eval metric."""
    steps = [r["step"] for r in trace]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(3, 1, sharex=True, figsize=figsize(1.0, ratio=0.9))
        axes[0].plot(steps, [r["commanded_sparsity"] for r in trace], color="C1", label="commanded")
        axes[0].plot(
            steps, [r["actual_sparsity"] for r in trace], ls="--", color="C2", label="actual"
        )
        axes[0].set_ylabel("sparsity")
        axes[0].legend(frameon=False)
        axes[1].plot(steps, [r["lr"] for r in trace], color="C3")
        axes[1].set_ylabel("learning rate")
        axes[2].plot(steps, [r["eval_metric"] for r in trace], color="C0")
        axes[2].set_ylabel(metric_name)
        axes[2].set_xlabel("training step")
        return _save(fig, path)


def plot_sweep(summary, path, metric_name="metric"):
    """Metric against NNZ with one-standard-deviation error bars.

    ``summary`` rows carry ``kind`` (dense or sparse), ``nnz_params``,
    ``metric_mean`` and ``metric_std``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.9))
        for kind, marker, color in (("dense", "s", "C0"), ("sparse", "o", "C1")):
            rows = sorted((r for r in summary if r["kind"] == kind), key=lambda r: r["nnz_params"])
            if not rows:
                continue
            ax.errorbar(
                [r["nnz_params"] for r in rows],
                [r["metric_mean"] for r in rows],
                yerr=[r["metric_std"] for r in rows],
                marker=marker,
                color=color,
                capsize=3,
                label=f"{kind} models",
            )
        ax.set_xscale("log")
        ax.set_xlabel("nonzero parameters")
        ax.set_ylabel(metric_name)
        ax.legend(frameon=False)
        return _save(fig, path)
