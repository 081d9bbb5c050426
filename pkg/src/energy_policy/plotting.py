"""Figure rendering for the CLI report paths.

Every function takes already-computed data plus an output path and writes
one PNG next to the delimited dump it illustrates.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .envs import EnvSpec

_MODE_COLORS = ("tab:blue", "tab:orange", "tab:green")


def _draw_env(ax, spec: EnvSpec) -> None:
    if spec.d_obs < 2:
        return
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.set_aspect("equal")
    if spec.name == "forked_paths":
        w = spec.wall_half_width
        ax.plot([-w, w], [spec.wall_y, spec.wall_y], "k-", lw=4, label="wall")
    for g in spec.goals:
        circle = plt.Circle(g, spec.tolerance, color="gold", alpha=0.8, zorder=3)
        ax.add_patch(circle)
    ax.plot(*spec.start, "ks", ms=6, zorder=3)


def plot_trajectories(trajectories: list, modes: list, spec: EnvSpec, path: str,
                      title: str = "") -> None:
    """Trajectory fan colored by realized mode; 1-D envs plot position vs step."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for traj, mode in zip(trajectories, modes):
        traj = np.asarray(traj)
        color = "gray" if mode is None else _MODE_COLORS[mode % len(_MODE_COLORS)]
        if spec.d_obs >= 2:
            ax.plot(traj[:, 0], traj[:, 1], color=color, alpha=0.5, lw=1)
        else:
            ax.plot(np.arange(len(traj)), traj[:, 0], color=color, alpha=0.5, lw=1)
    if spec.d_obs >= 2:
        _draw_env(ax, spec)
    else:
        ax.axhline(spec.goals[0][0], color="gold", lw=2)
        ax.set_xlabel("step")
        ax.set_ylabel("position")
    ax.set_title(title or spec.name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curve(history: list, path: str) -> None:
    epochs = [e for e, _ in history]
    losses = [l for _, l in history]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    if min(losses) > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_coverage(counts: dict, path: str, title: str = "mode coverage") -> None:
    labels = [("none" if k is None else f"mode {k}") for k in counts]
    values = list(counts.values())
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    ax.bar(labels, values, color="tab:blue")
    ax.set_ylabel("rollouts")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: list, path: str) -> None:
    fig, ax = plt.subplots(figsize=(max(5, 0.45 * len(rows)), 3.4))
    xs = np.arange(len(rows))
    ax.bar(xs - 0.2, [r["success_rate"] for r in rows], width=0.4, label="success")
    ax.bar(xs + 0.2, [r["min_mode_frac"] for r in rows], width=0.4, label="min-mode frac")
    ax.set_xticks(xs)
    ax.set_xticklabels(
        [f"a{r['alpha']:g}/{r['adaln_mode'][:3]}/{r['noise_dist']}" for r in rows],
        rotation=60, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_latency(reports: list, path: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = [r.name for r in reports]
    means = [r.mean_ms for r in reports]
    ax.bar(names, means, yerr=[r.std_ms for r in reports], color="tab:purple")
    ax.set_ylabel("ms per 8 executed actions")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


__all__ = [
    "plot_ablation", "plot_coverage", "plot_latency", "plot_loss_curve",
    "plot_trajectories",
]
