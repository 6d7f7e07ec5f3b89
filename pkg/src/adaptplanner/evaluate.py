"""Closed-loop episode execution, score normalization, benchmark suites, and
the coin-adaptation study. Reports are reproducible from the per-episode rows."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import derive_seed, rng_stream
from .diffusion import NoiseSchedule, Normalizer, sample_trajectory
from .errors import InvalidLayout, InvalidReference
from .guidance import guidance_for_task
from .maze import (
    BUNDLED_MAZES,
    DEFAULT_KD,
    DEFAULT_KP,
    DEFAULT_SWITCH_RADIUS,
    EnvConfig,
    EnvState,
    MazeSpec,
    TaskSpec,
    all_pair_distances,
    cell_center,
    plan_waypoints,
    random_free_point,
    step_detailed,
    track_waypoints,
)
from .trajectory import Trajectory

EPISODE_CSV_COLUMNS = (
    "task_id",
    "seed",
    "raw_return",
    "normalized",
    "success",
    "length",
    "min_coin_dist",
    "collision_steps",
)

# Hard-case anchor pairs for the bundled layouts, as (start cell, goal cell).
HARD_ANCHORS = {
    "medium": ((1, 1), (6, 6)),
    "large": ((7, 1), (7, 9)),
}


@dataclass
class Episode:
    """One closed-loop run: the plan, what the agent actually did, and scores."""

    task: TaskSpec
    seed: int
    plan: Trajectory
    states: np.ndarray = field(repr=False)
    actions: np.ndarray = field(repr=False)
    steps_at_goal: int = 0
    terminated_at: int = 0
    first_arrival: int | None = None
    collision_steps: int = 0
    min_coin_dist: float = math.nan

    @property
    def raw_return(self) -> float:
        return float(self.steps_at_goal)

    @property
    def success(self) -> int:
        return int(self.first_arrival is not None)

    @property
    def length(self) -> int:
        """Steps until first goal arrival; the step cap when the goal was missed."""
        return self.terminated_at + 1 if self.first_arrival is None else self.first_arrival


def run_episode(
    maze: MazeSpec,
    cfg: EnvConfig,
    params,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    task: TaskSpec,
    seed: int,
    horizon: int,
    alpha: float = 0.0,
    pin_coin: bool = False,
    kp: float = DEFAULT_KP,
    kd: float = DEFAULT_KD,
    switch_radius: float = DEFAULT_SWITCH_RADIUS,
) -> Episode:
    """Plan once with start/goal inpainting (plus coin guidance when set), then
    track the plan's positions with PD control for the full episode cap.

    Reward 1 accrues for every step that ends within goal_radius of the goal.
    """
    guide = guidance_for_task(task, horizon, normalizer, alpha=alpha, pin_coin=pin_coin)
    plan = sample_trajectory(sched, params, guide, horizon, seed, normalizer)
    waypoints = np.vstack([plan.positions, task.goal[None, :]])
    states, actions, collisions, _ = track_waypoints(
        maze,
        cfg,
        EnvState.at_rest(task.start),
        waypoints,
        task.goal,
        kp=kp,
        kd=kd,
        switch_radius=switch_radius,
        max_steps=cfg.max_episode_steps,
        stop_at_goal=False,
    )
    dist_goal = np.linalg.norm(states[1:, :2] - task.goal[None, :], axis=1)
    at_goal = dist_goal <= cfg.goal_radius
    arrivals = np.nonzero(at_goal)[0]
    min_coin = math.nan
    if task.coin is not None:
        min_coin = float(np.linalg.norm(states[:, :2] - task.coin[None, :], axis=1).min())
    return Episode(
        task=task,
        seed=seed,
        plan=plan,
        states=states,
        actions=actions,
        steps_at_goal=int(at_goal.sum()),
        terminated_at=len(actions) - 1,
        first_arrival=int(arrivals[0]) + 1 if arrivals.size else None,
        collision_steps=collisions,
        min_coin_dist=min_coin,
    )


# ---------------------------------------------------------------------------
# score normalization


def normalized_score(episode_or_return, ref_expert: float, ref_random: float) -> float:
    """Affine rescale anchoring the random policy at 0 and the expert at 100."""
    if not ref_expert > ref_random:
        raise InvalidReference(f"need ref_expert > ref_random, got {ref_expert} <= {ref_random}")
    raw = getattr(episode_or_return, "raw_return", episode_or_return)
    return 100.0 * (float(raw) - ref_random) / (ref_expert - ref_random)


def reference_returns(maze: MazeSpec, cfg: EnvConfig, n: int = 100) -> tuple[float, float]:
    """(expert, random) mean returns over n full-length episodes on random tasks.

    Both policies run the full step cap under the same per-step reward the
    benchmark uses, with streams keyed only by the maze name, so every command
    reproduces identical references.
    """
    expert_total = 0.0
    random_total = 0.0
    for index in range(n):
        rng = rng_stream(0, f"refs:{maze.name}", index)
        start = random_free_point(maze, cfg, rng)
        goal = random_free_point(maze, cfg, rng)
        waypoints = plan_waypoints(maze, start, goal)
        states, _, _, _ = track_waypoints(
            maze, cfg, EnvState.at_rest(start), waypoints, goal,
            max_steps=cfg.max_episode_steps, stop_at_goal=False,
        )
        expert_total += float(
            (np.linalg.norm(states[1:, :2] - goal[None, :], axis=1) <= cfg.goal_radius).sum()
        )
        state = EnvState.at_rest(start)
        hits = 0
        for _ in range(cfg.max_episode_steps):
            action = rng.uniform(-cfg.a_max, cfg.a_max, size=2)
            state, _ = step_detailed(maze, cfg, state, action)
            hits += int(np.linalg.norm(state.position - goal) <= cfg.goal_radius)
        random_total += float(hits)
    expert_mean = expert_total / n
    random_mean = random_total / n
    if not expert_mean > random_mean:
        raise InvalidReference(
            f"degenerate references on {maze.name}: expert {expert_mean} <= random {random_mean}"
        )
    return expert_mean, random_mean


# ---------------------------------------------------------------------------
# suites


@dataclass
class SuiteResult:
    """Per-episode rows plus the aggregate scores derived from them."""

    rows: list
    mean_normalized: float
    stderr_normalized: float
    success_rate: float
    mean_length: float
    mean_raw: float
    ref_expert: float
    ref_random: float
    seeds: list

    def summary(self) -> dict:
        return {
            "mean_normalized": self.mean_normalized,
            "stderr_normalized": self.stderr_normalized,
            "success_rate": self.success_rate,
            "mean_length": self.mean_length,
            "mean_raw": self.mean_raw,
            "ref_expert": self.ref_expert,
            "ref_random": self.ref_random,
            "episodes": len(self.rows),
            "seeds": list(self.seeds),
        }


def benchmark(
    maze: MazeSpec,
    cfg: EnvConfig,
    params,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    suite: list[TaskSpec],
    seeds: list[int],
    horizon: int,
    alpha: float = 0.0,
    refs: tuple[float, float] | None = None,
    out_dir: str | Path | None = None,
    label: str = "suite",
) -> SuiteResult:
    """Run every task under every seed and aggregate; optionally emit CSV/JSON."""
    if len(seeds) < 3:
        raise InvalidReference("benchmark protocol needs at least 3 seeds")
    ref_expert, ref_random = refs if refs is not None else reference_returns(maze, cfg)
    rows = []
    per_seed_scores = {s: [] for s in seeds}
    for t_idx, task in enumerate(suite):
        for seed in seeds:
            ep = run_episode(
                maze, cfg, params, sched, normalizer, task,
                derive_seed(seed, "episode", t_idx), horizon, alpha=alpha,
            )
            score = normalized_score(ep, ref_expert, ref_random)
            per_seed_scores[seed].append(score)
            rows.append(
                {
                    "task_id": task.task_id,
                    "seed": seed,
                    "raw_return": ep.raw_return,
                    "normalized": score,
                    "success": ep.success,
                    "length": ep.length,
                    "min_coin_dist": ep.min_coin_dist,
                    "collision_steps": ep.collision_steps,
                }
            )
    scores = np.array([r["normalized"] for r in rows])
    seed_means = np.array([np.mean(per_seed_scores[s]) for s in seeds])
    result = SuiteResult(
        rows=rows,
        mean_normalized=float(scores.mean()),
        stderr_normalized=float(seed_means.std(ddof=1) / np.sqrt(len(seeds))),
        success_rate=float(np.mean([r["success"] for r in rows])),
        mean_length=float(np.mean([r["length"] for r in rows])),
        mean_raw=float(np.mean([r["raw_return"] for r in rows])),
        ref_expert=ref_expert,
        ref_random=ref_random,
        seeds=list(seeds),
    )
    if out_dir is not None:
        write_suite_outputs(result, Path(out_dir), label)
    return result


def write_suite_outputs(result: SuiteResult, out_dir: Path, label: str) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{label}_episodes.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EPISODE_CSV_COLUMNS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: row[k] for k in EPISODE_CSV_COLUMNS})
    json_path = out_dir / f"{label}_summary.json"
    json_path.write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def random_suite(maze: MazeSpec, cfg: EnvConfig, n_tasks: int, seed: int) -> list[TaskSpec]:
    """Random distinct start/goal tasks for general benchmarking."""
    tasks = []
    for index in range(n_tasks):
        rng = rng_stream(seed, f"suite:{maze.name}", index)
        start = random_free_point(maze, cfg, rng)
        goal = random_free_point(maze, cfg, rng)
        tasks.append(TaskSpec(start=start, goal=goal, task_id=f"rand{index:03d}"))
    return tasks


def hard_case_suite(maze: MazeSpec, limit: int = 24) -> list[TaskSpec]:
    """The named long-path anchor plus top-decile BFS-length cell pairs."""
    if maze.name not in BUNDLED_MAZES:
        raise InvalidLayout(f"hard cases are defined for bundled layouts, not {maze.name!r}")
    pairs = list(all_pair_distances(maze).items())
    dists = np.array([d for _, d in pairs])
    threshold = np.percentile(dists, 90)
    eligible = [(cells, d) for cells, d in pairs if d >= threshold]
    eligible.sort(key=lambda kv: (-kv[1], kv[0]))
    anchor = HARD_ANCHORS.get(maze.name)
    chosen = []
    if anchor is not None:
        chosen.append(anchor)
    for cells, _ in eligible:
        if len(chosen) >= limit:
            break
        if cells not in chosen:
            chosen.append(cells)
    return [
        TaskSpec(start=cell_center(a), goal=cell_center(b), task_id=f"hard{i:03d}")
        for i, (a, b) in enumerate(chosen)
    ]


def coin_adaptation_eval(
    maze: MazeSpec,
    cfg: EnvConfig,
    params,
    sched: NoiseSchedule,
    normalizer: Normalizer,
    base_tasks: list[TaskSpec],
    coin: np.ndarray,
    alphas: list[float],
    seeds: list[int],
    horizon: int,
    coin_radius: float = 0.4,
    refs: tuple[float, float] | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Sweep guidance scales (always including 0) over the coin task suite.

    Per scale: coin pass rate (min distance <= coin_radius), goal success,
    mean min distance to the coin, and collision share.
    """
    coin = np.asarray(coin, dtype=np.float64).reshape(2)
    alphas = list(alphas)
    if 0.0 not in alphas:
        alphas = [0.0] + alphas
    ref_expert, ref_random = refs if refs is not None else reference_returns(maze, cfg)
    report = {"coin": coin.tolist(), "coin_radius": coin_radius, "alphas": {}}
    for alpha in alphas:
        rows = []
        for t_idx, base in enumerate(base_tasks):
            task = TaskSpec(
                start=base.start,
                goal=base.goal,
                coin=coin,
                coin_radius=coin_radius,
                task_id=base.task_id,
            )
            for seed in seeds:
                ep = run_episode(
                    maze, cfg, params, sched, normalizer, task,
                    derive_seed(seed, "episode", t_idx), horizon, alpha=alpha,
                )
                rows.append(
                    {
                        "task_id": task.task_id,
                        "seed": seed,
                        "raw_return": ep.raw_return,
                        "normalized": normalized_score(ep, ref_expert, ref_random),
                        "success": ep.success,
                        "length": ep.length,
                        "min_coin_dist": ep.min_coin_dist,
                        "collision_steps": ep.collision_steps,
                    }
                )
        report["alphas"][str(alpha)] = {
            "coin_pass_rate": float(np.mean([r["min_coin_dist"] <= coin_radius for r in rows])),
            "goal_success_rate": float(np.mean([r["success"] for r in rows])),
            "mean_min_coin_dist": float(np.mean([r["min_coin_dist"] for r in rows])),
            "mean_normalized": float(np.mean([r["normalized"] for r in rows])),
            "collision_episode_rate": float(np.mean([r["collision_steps"] > 0 for r in rows])),
            "rows": rows,
        }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "coin_episodes.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("alpha",) + EPISODE_CSV_COLUMNS)
            writer.writeheader()
            for alpha in alphas:
                for row in report["alphas"][str(alpha)]["rows"]:
                    writer.writerow({"alpha": alpha, **{k: row[k] for k in EPISODE_CSV_COLUMNS}})
        summary = {
            a: {k: v for k, v in block.items() if k != "rows"}
            for a, block in report["alphas"].items()
        }
        (out_dir / "coin_summary.json").write_text(
            json.dumps({"coin": report["coin"], "alphas": summary}, indent=2, sort_keys=True) + "\n"
        )
    return report
