"""Matplotlib rendering: plan SVGs and the report figures written next to the
delimited outputs. SVG output is byte-stable for identical inputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import LineCollection
from matplotlib.patches import Circle, Rectangle

from .maze import MazeSpec, TaskSpec
from .trajectory import Trajectory

# fixed hash salt keeps matplotlib's generated SVG ids reproducible
matplotlib.rcParams["svg.hashsalt"] = "adaptplanner"

_SVG_META = {"Date": None, "Creator": "adaptplanner"}


def _maze_axes(ax, maze: MazeSpec) -> None:
    ax.set_xlim(0, maze.cols)
    ax.set_ylim(maze.rows, 0)  # row 0 of the text layout on top
    ax.set_aspect("equal")
    ax.set_xticks([])
    ax.set_yticks([])
    for r, c in map(tuple, maze.wall_cells()):
        ax.add_patch(Rectangle((c, r), 1.0, 1.0, facecolor="#30343a", edgecolor="none"))


def render_plan(
    traj: Trajectory,
    maze: MazeSpec,
    task: TaskSpec | None,
    path: str | Path,
    title: str = "",
) -> Path:
    """Maze grid, time-shaded trajectory polyline, and start/goal/coin markers."""
    fig, ax = plt.subplots(figsize=(max(4.0, maze.cols * 0.5), max(3.0, maze.rows * 0.5)))
    _maze_axes(ax, maze)
    pts = traj.positions
    segments = np.stack([pts[:-1], pts[1:]], axis=1)
    colors = plt.cm.viridis(np.linspace(0.0, 1.0, max(len(segments), 2)))
    ax.add_collection(LineCollection(segments, colors=colors[: len(segments)], linewidths=1.6))
    if task is not None:
        ax.plot(*task.start, marker="o", color="#1f77b4", markersize=9, zorder=5)
        ax.plot(*task.goal, marker="*", color="#2ca02c", markersize=15, zorder=5)
        if task.coin is not None:
            ax.add_patch(
                Circle(task.coin, task.coin_radius, facecolor="none", edgecolor="#d4a017", lw=1.4)
            )
            ax.plot(*task.coin, marker="o", color="#d4a017", markersize=7, zorder=5)
    if title:
        ax.set_title(title, fontsize=10)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata=_SVG_META if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def render_loss_curve(history: list, path: str | Path, title: str = "training loss") -> Path:
    """Loss trace with its 100-step moving average."""
    steps = np.array([s for s, _ in history])
    losses = np.array([l for _, l in history])
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(steps, losses, lw=0.8, alpha=0.55, label="batch loss")
    if len(losses) >= 3:
        window = min(10, len(losses))
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1 :], smooth, lw=1.6, label="moving average")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def render_suite_scores(rows: list, path: str | Path, title: str = "episode scores") -> Path:
    """Per-task normalized score bars (mean over seeds)."""
    by_task: dict = {}
    for row in rows:
        by_task.setdefault(row["task_id"], []).append(row["normalized"])
    labels = list(by_task)
    means = [float(np.mean(by_task[t])) for t in labels]
    fig, ax = plt.subplots(figsize=(max(5.0, 0.35 * len(labels)), 3.2))
    ax.bar(range(len(labels)), means, color="#4878cf")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=6)
    ax.set_ylabel("normalized score")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def render_phase_progress(reports: list, path: str | Path) -> Path:
    """Mean hard-suite score before/after each fine-tuning phase."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs, ys = [], []
    for rep in reports:
        if rep.pre_eval:
            xs.append(rep.phase - 0.5)
            ys.append(rep.pre_eval.get("mean_normalized"))
        if rep.post_eval:
            xs.append(rep.phase)
            ys.append(rep.post_eval.get("mean_normalized"))
    ax.plot(xs, ys, marker="o", color="#4878cf")
    ax.set_xlabel("evolution phase")
    ax.set_ylabel("mean normalized score")
    ax.set_title("self-evolution progress", fontsize=10)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def render_coin_curve(report: dict, path: str | Path) -> Path:
    """Coin pass rate and mean min-distance across guidance scales."""
    alphas = sorted(float(a) for a in report["alphas"])
    pass_rates = [report["alphas"][_akey(report, a)]["coin_pass_rate"] for a in alphas]
    dists = [report["alphas"][_akey(report, a)]["mean_min_coin_dist"] for a in alphas]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(alphas, pass_rates, marker="o", color="#d4a017")
    ax1.set_xlabel("guidance scale")
    ax1.set_ylabel("coin pass rate")
    ax2.plot(alphas, dists, marker="o", color="#4878cf")
    ax2.set_xlabel("guidance scale")
    ax2.set_ylabel("mean min distance to coin")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _akey(report: dict, alpha: float) -> str:
    for key in report["alphas"]:
        if float(key) == alpha:
            return key
    raise KeyError(alpha)
