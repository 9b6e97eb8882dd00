"""Report figures written next to the delimited outputs of each command."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _rolling(x, window: int = 10):
    x = np.asarray(x, dtype=float)
    out = np.full_like(x, np.nan)
    for i in range(len(x)):
        seg = x[max(0, i - window + 1): i + 1]
        seg = seg[~np.isnan(seg)]
        if len(seg):
            out[i] = seg.mean()
    return out


def learning_curves(history: list[dict], path, window: int = 10) -> None:
    """Success rate, loss and ADE/FDE against training episode."""
    ep = [r["episode"] for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    axes[0].plot(ep, 100 * _rolling([float(r["success"]) for r in history], window))
    axes[0].set_ylabel(f"success rate % (last {window})")
    axes[0].set_ylim(-5, 105)
    axes[1].plot(ep, [r["loss"] for r in history])
    axes[1].set_ylabel("training loss")
    axes[1].set_yscale("log")
    axes[2].plot(ep, _rolling([r["ade"] for r in history], window), label="ADE")
    axes[2].plot(ep, _rolling([r["fde"] for r in history], window), label="FDE")
    axes[2].set_ylabel("displacement error (m)")
    axes[2].legend()
    for ax in axes:
        ax.set_xlabel("episode")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metric_bars(table: dict[str, list], path, metric: str = "success") -> None:
    """Grouped bars of one metric: ``table`` maps a row label to ScenarioMetrics rows."""
    labels = list(table)
    scen = [r.scenario for r in next(iter(table.values()))]
    x = np.arange(len(scen))
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(2 + 1.6 * len(scen), 3.6))
    for i, lab in enumerate(labels):
        vals = [getattr(r, metric) for r in table[lab]]
        ax.bar(x + (i - (len(labels) - 1) / 2) * width, [0 if math.isnan(v) else v for v in vals], width, label=lab)
    ax.set_xticks(x)
    ax.set_xticklabels(scen)
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def prediction_plot(ego_history, neighbor_histories, valid, blocks, path) -> None:
    """Histories plus one predicted-future panel per plan.

    ``blocks`` is a list of ``(label, plan [T, 4], trajectories [N, T, 3])``,
    everything in one frame.
    """
    fig, axes = plt.subplots(1, len(blocks), figsize=(5 * len(blocks), 5), squeeze=False)
    for ax, (label, plan, traj) in zip(axes[0], blocks):
        ax.plot(ego_history[:, 0], ego_history[:, 1], color="k", lw=2)
        ax.plot(plan[:, 0], plan[:, 1], color="tab:red", lw=2, label="ego plan")
        for i in np.nonzero(valid)[0]:
            h = neighbor_histories[i]
            h = h[np.any(h != 0, axis=1)]
            ax.plot(h[:, 0], h[:, 1], color="0.5")
            ax.plot(traj[i, :, 0], traj[i, :, 1], "--", label=f"agent {i}")
        ax.set_title(label)
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
