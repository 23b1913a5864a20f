"""Render figures from a run directory's delimited outputs.

Reads the CSV files written by :func:`socem.harness.export_results` and
draws the standard report set: cumulative-cost curves, position and
velocity trajectory profiles, an action-density panel, and the
exploration-covariance decay in linear and log scale.  Figures are PNG
files written next to the CSVs (or into a chosen directory).
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_report"]


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.asarray([row for row in reader if row], dtype=float)
    return header, rows


def _pick_iterations(iterations: np.ndarray) -> list[int]:
    # First, second and last available iterations; the interesting trio.
    its = sorted(set(int(i) for i in iterations))
    picks = [its[0]]
    if len(its) > 2:
        picks.append(its[1])
    if len(its) > 1:
        picks.append(its[-1])
    return picks


def _cost_figure(run_dir: Path, out_dir: Path) -> Path:
    _, rows = _read_csv(run_dir / "costs.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {0: "tab:red", 1: "tab:blue"}
    picks = _pick_iterations(rows[:, 0])
    for rank, it in enumerate(picks):
        sel = rows[rows[:, 0] == it]
        k, mean, std = sel[:, 1], sel[:, 2], sel[:, 3]
        color = colors.get(rank, "tab:purple")
        ax.plot(k, mean, color=color, label=f"iteration {it}")
        ax.fill_between(k, mean - std, mean + std, color=color, alpha=0.2)
    ax.set_xlabel("time step")
    ax.set_ylabel("cumulative cost")
    ax.set_title("Cumulative cost per step (mean $\\pm$ std over eval rollouts)")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "cost_curves.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _trajectory_figures(run_dir: Path, out_dir: Path) -> list[Path]:
    _, rows = _read_csv(run_dir / "trajectories.csv")
    picks = _pick_iterations(rows[:, 0])
    colors = {0: "tab:red", 1: "tab:blue"}
    paths = []

    fig, ax = plt.subplots(figsize=(5.5, 5))
    for rank, it in enumerate(picks):
        sel = rows[rows[:, 0] == it]
        color = colors.get(rank, "tab:purple")
        by_roll = defaultdict(list)
        for row in sel:
            by_roll[int(row[1])].append(row)
        for r, rws in by_roll.items():
            arr = np.asarray(rws)
            ax.plot(arr[:, 3], arr[:, 4], color=color, alpha=0.25, lw=0.8,
                    label=f"iteration {it}" if r == 0 else None)
    ax.set_xlabel("x position")
    ax.set_ylabel("y position")
    ax.set_title("Evaluation position trajectories")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "trajectories.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    paths.append(path)

    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharex=True)
    for rank, it in enumerate(picks):
        sel = rows[rows[:, 0] == it]
        color = colors.get(rank, "tab:purple")
        ks = sorted(set(sel[:, 2]))
        vx_mean = [sel[sel[:, 2] == k][:, 5].mean() for k in ks]
        vy_mean = [sel[sel[:, 2] == k][:, 6].mean() for k in ks]
        axes[0].plot(ks, vx_mean, color=color, label=f"iteration {it}")
        axes[1].plot(ks, vy_mean, color=color, label=f"iteration {it}")
    axes[0].set_xlabel("time step")
    axes[0].set_ylabel("v_x")
    axes[1].set_xlabel("time step")
    axes[1].set_ylabel("v_y")
    axes[0].legend()
    fig.suptitle("Mean velocity profiles")
    fig.tight_layout()
    path = out_dir / "velocities.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    paths.append(path)
    return paths


def _action_figure(run_dir: Path, out_dir: Path) -> Path:
    from scipy.stats import gaussian_kde

    _, rows = _read_csv(run_dir / "actions.csv")
    picks = _pick_iterations(rows[:, 0])
    fig, axes = plt.subplots(1, len(picks), figsize=(4 * len(picks), 4),
                             sharex=True, sharey=True, squeeze=False)
    for ax, it in zip(axes[0], picks):
        sel = rows[rows[:, 0] == it]
        ax.scatter(sel[:, 3], sel[:, 4], s=4, alpha=0.25, color="tab:gray")
        pts = sel[:, 3:5].T
        if pts.shape[1] > 4 and np.linalg.matrix_rank(np.cov(pts)) == 2:
            kde = gaussian_kde(pts)
            gx = np.linspace(pts[0].min(), pts[0].max(), 80)
            gy = np.linspace(pts[1].min(), pts[1].max(), 80)
            gxx, gyy = np.meshgrid(gx, gy)
            dens = kde(np.vstack([gxx.ravel(), gyy.ravel()])).reshape(gxx.shape)
            ax.contour(gxx, gyy, dens, levels=6, cmap="viridis")
        ax.set_title(f"iteration {it}")
        ax.set_xlabel("a_x")
    axes[0][0].set_ylabel("a_y")
    fig.suptitle("Evaluation action density")
    fig.tight_layout()
    path = out_dir / "action_kde.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _covariance_figure(run_dir: Path, out_dir: Path) -> Path:
    _, rows = _read_csv(run_dir / "covariance.csv")
    its = sorted(set(int(i) for i in rows[:, 0]))
    sums = [rows[rows[:, 0] == it][:, 2].sum() for it in its]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, scale in zip(axes, ("linear", "log")):
        for it in its:
            sel = rows[rows[:, 0] == it]
            ax.plot([it] * len(sel), sel[:, 2], "+", color="tab:gray", alpha=0.5)
        ax.plot(its, sums, "-o", color="tab:blue", label="sum over steps")
        ax.set_yscale(scale)
        ax.set_xlabel("iteration")
        ax.set_ylabel("covariance trace")
        ax.legend()
    fig.suptitle("Exploration covariance decay")
    fig.tight_layout()
    path = out_dir / "covariance_decay.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render all figures for one run directory; returns the written paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "figures"
    out.mkdir(parents=True, exist_ok=True)
    written = [_cost_figure(run_dir, out)]
    written.extend(_trajectory_figures(run_dir, out))
    written.append(_action_figure(run_dir, out))
    written.append(_covariance_figure(run_dir, out))
    return written
