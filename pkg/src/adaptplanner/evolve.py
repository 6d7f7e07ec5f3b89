"""Self-evolution engine: synthetic plan generation, the rule-based
discriminator with its dynamics-consistency gate, the growing data pool, and
the phase loop (generate -> filter -> append -> fine-tune)."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import denoiser as dn
from .config import derive_seed, rng_stream
from .diffusion import NoiseSchedule, Normalizer, sample_trajectory
from .errors import InvalidConfig, SchemaMismatch
from .guidance import SparseGoal, guidance_for_task
from .maze import (
    EnvConfig,
    EnvState,
    MazeSpec,
    TaskSpec,
    all_pair_distances,
    cell_center,
    extend_with_hold,
    inverse_dynamics,
    step_detailed,
)
from .trajectory import Trajectory


# ---------------------------------------------------------------------------
# statistics and the discriminator


@dataclass
class TrajectoryStats:
    """What the discriminator sees: executed length, raw return, worst
    dynamics deviation, goal success, and wall contacts."""

    length: int
    raw_return: float
    deviation: float
    success: int = 0
    collision_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "length": int(self.length),
            "raw_return": float(self.raw_return),
            "deviation": float(self.deviation),
            "success": int(self.success),
            "collision_steps": int(self.collision_steps),
        }


@dataclass
class DiscriminatorRule:
    """Accept when consistent and either long, or not-short with a high
    efficiency score raw_return + weight * (max_steps - length)."""

    long_len: float
    min_len: float
    score_floor: float
    max_deviation: float
    max_episode_steps: int
    length_weight: float = 1.0

    def __post_init__(self):
        if not self.min_len <= self.long_len <= self.max_episode_steps:
            raise InvalidConfig("rule needs min_len <= long_len <= max_episode_steps")
        if self.max_deviation <= 0:
            raise InvalidConfig("max_deviation must be positive")

    @staticmethod
    def paper_constants(maze_name: str, max_deviation: float) -> "DiscriminatorRule":
        """The published threshold sets for the three bundled layouts."""
        table = {
            "umaze": (200.0, 50.0, 210.0, 300),
            "medium": (450.0, 200.0, 400.0, 600),
            "large": (650.0, 270.0, 400.0, 800),
        }
        if maze_name not in table:
            raise InvalidConfig(f"no published constants for maze {maze_name!r}")
        c1, c2, c3, max_e = table[maze_name]
        return DiscriminatorRule(
            long_len=c1,
            min_len=c2,
            score_floor=c3,
            max_deviation=max_deviation,
            max_episode_steps=max_e,
        )

    @staticmethod
    def from_expert_pool(pool: "DataPool", weight: float = 1.0) -> "DiscriminatorRule":
        """Scale-free defaults: length cuts at fractions of the step cap and the
        score floor at the expert pool's median score."""
        cfg = pool.env
        max_e = cfg.max_episode_steps
        expert_scores = [
            e.stats.raw_return + weight * (max_e - e.stats.length)
            for e in pool.entries
            if e.provenance.kind == "expert"
        ]
        if not expert_scores:
            raise InvalidConfig("pool has no expert entries to calibrate against")
        return DiscriminatorRule(
            long_len=0.8 * max_e,
            min_len=0.3 * max_e,
            score_floor=float(np.median(expert_scores)),
            max_deviation=2.0 * cfg.v_max * cfg.dt,
            max_episode_steps=max_e,
            length_weight=weight,
        )


def discriminate(stats: TrajectoryStats, rule: DiscriminatorRule):
    """Pure accept/reject with the first failing clause as the reason."""
    if stats.length > rule.max_episode_steps:
        raise InvalidConfig(f"stats.length {stats.length} exceeds the episode cap")
    if stats.deviation > rule.max_deviation:
        return False, "deviation"
    if stats.length > rule.long_len:
        return True, "long"
    if stats.length <= rule.min_len:
        return False, "too_short"
    score = stats.raw_return + rule.length_weight * (rule.max_episode_steps - stats.length)
    if score > rule.score_floor:
        return True, "score"
    return False, "low_score"


# ---------------------------------------------------------------------------
# data pool


@dataclass(frozen=True)
class Provenance:
    kind: str  # "expert" | "synthetic"
    phase: int = 0
    task_id: str = ""


@dataclass
class PoolEntry:
    trajectory: Trajectory
    provenance: Provenance
    stats: TrajectoryStats
    _padded: dict = field(default_factory=dict, repr=False)

    def padded_values(self, maze: MazeSpec, cfg: EnvConfig, horizon: int) -> np.ndarray:
        cached = self._padded.get(horizon)
        if cached is None:
            cached = extend_with_hold(maze, cfg, self.trajectory, horizon).values
            self._padded[horizon] = cached
        return cached


class DataPool:
    """Append-only training set of expert and accepted synthetic rollouts."""

    def __init__(self, maze: MazeSpec, env: EnvConfig, normalizer: Normalizer | None = None):
        self.maze = maze
        self.env = env
        self.normalizer = normalizer
        self.entries: list[PoolEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def counts(self) -> dict:
        counter = Counter(e.provenance.kind for e in self.entries)
        return dict(counter)

    def add_expert(self, trajectories: list[Trajectory]) -> None:
        for traj in trajectories:
            self.entries.append(
                PoolEntry(traj, Provenance(kind="expert"), expert_stats(traj, self.env))
            )

    def add_entries(self, entries: list[PoolEntry]) -> None:
        self.entries.extend(entries)

    def fit_normalizer(self) -> Normalizer:
        self.normalizer = Normalizer.fit([e.trajectory for e in self.entries])
        return self.normalizer

    def training_batch(self, rng: np.random.Generator, batch_size: int, horizon: int) -> np.ndarray:
        """(batch, horizon, 6) normalized windows.

        Short episodes are padded by simulated holding at their endpoint; long
        episodes contribute either their first or their last `horizon` rows, so
        both the rest-at-start and rest-at-goal boundary patterns stay covered.
        """
        if self.normalizer is None:
            raise InvalidConfig("pool has no fitted normalizer")
        if not self.entries:
            raise SchemaMismatch("pool is empty")
        idx = rng.integers(len(self.entries), size=batch_size)
        align_end = rng.random(batch_size) < 0.5
        batch = np.empty((batch_size, horizon, 6))
        for j, (entry_idx, from_end) in enumerate(zip(idx, align_end)):
            entry = self.entries[int(entry_idx)]
            values = entry.padded_values(self.maze, self.env, horizon)
            window = values[-horizon:] if from_end else values[:horizon]
            batch[j] = window
        batch = self.normalizer.normalize(batch)
        return np.clip(batch, -1.0, 1.0)


def expert_stats(traj: Trajectory, cfg: EnvConfig) -> TrajectoryStats:
    """Stats for a goal-reaching expert episode; its own endpoint is the goal."""
    goal = traj.positions[-1]
    reward = SparseGoal(goal, cfg.goal_radius)
    values = reward.values(traj.states, traj.actions)
    return TrajectoryStats(
        length=traj.horizon - 1,
        raw_return=float(values.sum()),
        deviation=0.0,
        success=1,
        collision_steps=0,
    )


# ---------------------------------------------------------------------------
# executing generated plans


def rollout_executable(
    maze: MazeSpec,
    cfg: EnvConfig,
    tau: Trajectory,
    goal: np.ndarray | None = None,
    reward=None,
):
    """Re-execute a generated plan through the true dynamics.

    Each step applies the inverse-dynamics action toward the generated next
    state; the per-step gap between executed and generated states is the
    dynamics deviation. Execution stops early only on goal arrival.
    Returns (states, actions, stats).
    """
    gen_states = tau.states
    state = EnvState.from_vector(gen_states[0])
    states = [state.as_vector()]
    actions = []
    deviation = 0.0
    collisions = 0
    reached = False
    if goal is not None:
        goal = np.asarray(goal, dtype=np.float64).reshape(2)
        reached = float(np.linalg.norm(state.position - goal)) <= cfg.goal_radius
    for t in range(tau.horizon - 1):
        if reached:
            break
        target = EnvState.from_vector(gen_states[t + 1])
        action = inverse_dynamics(cfg, state, target)
        state, hit = step_detailed(maze, cfg, state, action)
        collisions += int(hit)
        deviation = max(deviation, float(np.linalg.norm(state.as_vector() - gen_states[t + 1])))
        actions.append(action)
        states.append(state.as_vector())
        if goal is not None and float(np.linalg.norm(state.position - goal)) <= cfg.goal_radius:
            reached = True
    states = np.array(states)
    actions = np.array(actions).reshape(len(actions), 2)
    if reward is not None:
        padded_actions = np.vstack([actions, np.zeros((1, 2))]) if len(actions) < len(states) else actions
        raw_return = float(reward.values(states, padded_actions).sum())
    else:
        raw_return = 0.0
    stats = TrajectoryStats(
        length=len(actions),
        raw_return=raw_return,
        deviation=deviation,
        success=int(reached),
        collision_steps=collisions,
    )
    return states, actions, stats


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class PhaseReport:
    phase: int
    attempted: int = 0
    accepted: int = 0
    rejections: dict = field(default_factory=dict)
    zero_acceptance: bool = False
    pool_before: int = 0
    pool_after: int = 0
    finetune_steps: int = 0
    pre_eval: dict = field(default_factory=dict)
    post_eval: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "attempted": self.attempted,
            "accepted": self.accepted,
            "rejections": dict(sorted(self.rejections.items())),
            "zero_acceptance": self.zero_acceptance,
            "pool_before": self.pool_before,
            "pool_after": self.pool_after,
            "finetune_steps": self.finetune_steps,
            "pre_eval": self.pre_eval,
            "post_eval": self.post_eval,
        }


def stratified_tasks(
    maze: MazeSpec, rng: np.random.Generator, n_tasks: int, coin_tasks: int = 0
) -> list[TaskSpec]:
    """Start/goal cell pairs sampled evenly from short/medium/long path terciles."""
    pairs = list(all_pair_distances(maze).items())
    pairs.sort(key=lambda kv: (kv[1], kv[0]))
    dists = np.array([d for _, d in pairs])
    lo, hi = np.quantile(dists, [1.0 / 3.0, 2.0 / 3.0])
    terciles = [
        [p for p, d in pairs if d <= lo],
        [p for p, d in pairs if lo < d <= hi],
        [p for p, d in pairs if d > hi],
    ]
    tasks = []
    for t_idx in range(n_tasks):
        bucket = terciles[t_idx % 3]
        a, b = bucket[int(rng.integers(len(bucket)))]
        if rng.random() < 0.5:
            a, b = b, a
        tasks.append(TaskSpec(start=cell_center(a), goal=cell_center(b)))
    free = maze.free_cells()
    for _ in range(coin_tasks):
        a, b = (free[int(rng.integers(len(free)))] for _ in range(2))
        coin = free[int(rng.integers(len(free)))]
        tasks.append(TaskSpec(start=cell_center(a), goal=cell_center(b), coin=cell_center(coin)))
    return tasks


def generate_synthetic(
    sched: NoiseSchedule,
    params: dn.DenoiserParams,
    maze: MazeSpec,
    cfg: EnvConfig,
    tasks: list[TaskSpec],
    per_task: int,
    rule: DiscriminatorRule,
    seed: int,
    normalizer: Normalizer,
    horizon: int,
    phase: int = 1,
    attempt_factor: int = 20,
    coin_alpha: float = -100.0,
):
    """Sample plans per task, execute them, and keep the discriminator's picks.

    Accepted entries store the executed rollout, not the raw plan, so every
    pool addition respects the dynamics by construction. Executions that
    touch a wall are discarded: a wall contact rewrites the motion, so the
    stored rollout would not re-execute exactly.
    """
    accepted: list[PoolEntry] = []
    rejections: Counter = Counter()
    attempted = 0
    for t_idx, task in enumerate(tasks):
        guide = guidance_for_task(
            task, horizon, normalizer, alpha=coin_alpha if task.coin is not None else 0.0
        )
        reward = SparseGoal(task.goal, cfg.goal_radius)
        kept = 0
        for attempt in range(attempt_factor * per_task):
            if kept >= per_task:
                break
            attempted += 1
            plan_seed = derive_seed(seed, "synthetic", phase, t_idx, attempt)
            plan = sample_trajectory(sched, params, guide, horizon, plan_seed, normalizer)
            states, actions, stats = rollout_executable(maze, cfg, plan, task.goal, reward)
            ok, reason = discriminate(stats, rule)
            if ok and stats.collision_steps > 0:
                ok, reason = False, "collision"
            if not ok:
                rejections[reason] += 1
                continue
            kept += 1
            accepted.append(
                PoolEntry(
                    Trajectory.from_rollout(states, actions),
                    Provenance(kind="synthetic", phase=phase, task_id=task.task_id),
                    stats,
                )
            )
    return accepted, attempted, dict(rejections)


# ---------------------------------------------------------------------------
# phase loop


@dataclass
class PhaseConfig:
    maze: MazeSpec
    env: EnvConfig
    sched: NoiseSchedule
    horizon: int
    base_steps: int
    batch_size: int = 32
    lr: float = 2e-4
    seed: int = 0
    n_tasks: int = 18
    per_task: int = 2
    attempt_factor: int = 20
    coin_tasks: int = 0
    coin_alpha: float = -100.0
    finetune_divisor: int = 4
    rule: DiscriminatorRule | None = None
    eval_fn: object | None = None  # callable(params) -> summary dict


def run_phase(pool: DataPool, params: dn.DenoiserParams, phase_cfg: PhaseConfig):
    """One evolution cycle: generate, filter, append, fine-tune, evaluate."""
    if len(pool) == 0:
        raise InvalidConfig("run_phase needs a non-empty pool")
    k = params.phase_tag + 1
    report = PhaseReport(phase=k, pool_before=len(pool))
    if phase_cfg.eval_fn is not None:
        report.pre_eval = phase_cfg.eval_fn(params)
    rule = phase_cfg.rule or DiscriminatorRule.from_expert_pool(pool)
    tasks = stratified_tasks(
        phase_cfg.maze,
        rng_stream(phase_cfg.seed, "phase-tasks", k),
        phase_cfg.n_tasks,
        phase_cfg.coin_tasks,
    )
    accepted, attempted, rejections = generate_synthetic(
        phase_cfg.sched,
        params,
        phase_cfg.maze,
        phase_cfg.env,
        tasks,
        phase_cfg.per_task,
        rule,
        phase_cfg.seed,
        pool.normalizer,
        phase_cfg.horizon,
        phase=k,
        attempt_factor=phase_cfg.attempt_factor,
        coin_alpha=phase_cfg.coin_alpha,
    )
    report.attempted = attempted
    report.accepted = len(accepted)
    report.rejections = rejections
    report.zero_acceptance = len(accepted) == 0
    pool.add_entries(accepted)
    report.pool_after = len(pool)
    steps = phase_cfg.base_steps // phase_cfg.finetune_divisor
    report.finetune_steps = steps
    tuned = dn.train(
        phase_cfg.sched,
        pool,
        steps=steps,
        batch_size=phase_cfg.batch_size,
        lr=phase_cfg.lr,
        seed=derive_seed(phase_cfg.seed, "finetune", k),
        horizon=phase_cfg.horizon,
        start=params,
    )
    tuned.phase_tag = k
    if phase_cfg.eval_fn is not None:
        report.post_eval = phase_cfg.eval_fn(tuned)
    return tuned, pool, report


def evolve(pool: DataPool, params: dn.DenoiserParams, n_phases: int, phase_cfg: PhaseConfig):
    """Fold run_phase n_phases times; phase tags increase monotonically."""
    if n_phases < 1:
        raise InvalidConfig("n_phases must be >= 1")
    reports = []
    for _ in range(n_phases):
        params, pool, report = run_phase(pool, params, phase_cfg)
        reports.append(report)
    return params, pool, reports
