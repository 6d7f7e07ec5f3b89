"""Point-mass maze world: layout parsing, double-integrator dynamics, PD tracking,
and expert dataset generation.

Coordinates are continuous cell units: cell (r, c) spans x in [c, c+1] and
y in [r, r+1] with its center at (c + 0.5, r + 0.5); the origin is the top-left
of the text layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleTask, InvalidConfig, InvalidLayout, InvalidTask, MalformedMaze
from .trajectory import Trajectory

WALL_CHAR = "#"
OPEN_CHAR = "O"

# Fixed neighbor probe order for BFS tie-breaking: N, E, S, W.
NEIGHBOR_ORDER = ((-1, 0), (0, 1), (1, 0), (0, -1))


@dataclass(frozen=True)
class MazeSpec:
    """Parsed wall/open grid. `cells` is bool, True where a cell is a wall."""

    rows: int
    cols: int
    cells: np.ndarray = field(repr=False)
    name: str = "maze"

    def is_wall(self, r: int, c: int) -> bool:
        return bool(self.cells[r, c])

    def free_cells(self) -> list[tuple[int, int]]:
        rr, cc = np.nonzero(~self.cells)
        return list(zip(rr.tolist(), cc.tolist()))

    def wall_cells(self) -> np.ndarray:
        """(n_walls, 2) array of (row, col) wall cells."""
        rr, cc = np.nonzero(self.cells)
        return np.stack([rr, cc], axis=1)

    def to_text(self) -> str:
        return "\n".join(
            "".join(WALL_CHAR if self.cells[r, c] else OPEN_CHAR for c in range(self.cols))
            for r in range(self.rows)
        )


@dataclass
class EnvConfig:
    """Dynamics and episode limits for the point-mass agent."""

    dt: float = 0.1
    v_max: float = 1.0
    a_max: float = 1.0
    agent_radius: float = 0.1
    max_episode_steps: int = 300
    goal_radius: float = 0.25

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidConfig("dt must be positive")
        if self.v_max <= 0 or self.a_max <= 0:
            raise InvalidConfig("v_max and a_max must be positive")
        if self.agent_radius < 0 or self.agent_radius >= 0.5:
            raise InvalidConfig("agent_radius must lie in [0, 0.5)")
        if self.max_episode_steps < 1:
            raise InvalidConfig("max_episode_steps must be positive")
        if self.goal_radius <= 0:
            raise InvalidConfig("goal_radius must be positive")
        if self.a_max * self.dt > self.v_max:
            raise InvalidConfig("a_max * dt must not exceed v_max")


@dataclass
class EnvState:
    """Continuous agent state: position and velocity, both 2-vectors."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @staticmethod
    def from_vector(vec: np.ndarray) -> "EnvState":
        vec = np.asarray(vec, dtype=np.float64).reshape(4)
        return EnvState(vec[:2].copy(), vec[2:].copy())

    @staticmethod
    def at_rest(position) -> "EnvState":
        return EnvState(np.asarray(position, dtype=np.float64), np.zeros(2))


@dataclass
class TaskSpec:
    """One navigation task: start, goal, and an optional bonus point to visit."""

    start: np.ndarray
    goal: np.ndarray
    coin: np.ndarray | None = None
    coin_radius: float = 0.4
    task_id: str = ""

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64).reshape(2)
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(2)
        if self.coin is not None:
            self.coin = np.asarray(self.coin, dtype=np.float64).reshape(2)
        if self.coin_radius <= 0:
            raise InvalidConfig("coin_radius must be positive")
        if not self.task_id:
            self.task_id = "task_{:.2f}_{:.2f}__{:.2f}_{:.2f}".format(
                self.start[0], self.start[1], self.goal[0], self.goal[1]
            )


# ---------------------------------------------------------------------------
# layout parsing


def parse_maze(text: str, name: str = "maze") -> MazeSpec:
    """Parse a maze string of '#'/'O' rows into a validated MazeSpec.

    Rows may be separated by newlines or by literal backslash pairs, so both
    file layouts and inline string constants parse.
    """
    raw = text.strip()
    if "\\" in raw:
        raw = raw.replace("\\\\", "\n").replace("\\", "\n")
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise MalformedMaze("maze text is empty")
    width = len(lines[0])
    for ln in lines:
        if len(ln) != width:
            raise MalformedMaze(f"ragged rows: expected width {width}, got {len(ln)!r} in {ln!r}")
        bad = set(ln) - {WALL_CHAR, OPEN_CHAR}
        if bad:
            raise MalformedMaze(f"illegal characters {sorted(bad)} in maze text")
    rows, cols = len(lines), width
    cells = np.array([[ch == WALL_CHAR for ch in ln] for ln in lines], dtype=bool)
    spec = MazeSpec(rows=rows, cols=cols, cells=cells, name=name)
    _validate_layout(spec)
    return spec


def _validate_layout(maze: MazeSpec) -> None:
    if maze.rows < 3 or maze.cols < 3:
        raise InvalidLayout(f"maze must be at least 3x3, got {maze.rows}x{maze.cols}")
    border = np.concatenate(
        [maze.cells[0, :], maze.cells[-1, :], maze.cells[:, 0], maze.cells[:, -1]]
    )
    if not border.all():
        raise InvalidLayout("all border cells must be walls")
    free = maze.free_cells()
    if len(free) < 2:
        raise InvalidLayout("maze needs at least 2 open cells")
    seen = _flood_fill(maze, free[0])
    if len(seen) != len(free):
        raise InvalidLayout(
            f"open cells are not 4-connected ({len(seen)} reachable of {len(free)})"
        )


def _flood_fill(maze: MazeSpec, start: tuple[int, int]) -> set:
    seen = {start}
    stack = [start]
    while stack:
        r, c = stack.pop()
        for dr, dc in NEIGHBOR_ORDER:
            nr, nc = r + dr, c + dc
            if 0 <= nr < maze.rows and 0 <= nc < maze.cols:
                if not maze.cells[nr, nc] and (nr, nc) not in seen:
                    seen.add((nr, nc))
                    stack.append((nr, nc))
    return seen


# ---------------------------------------------------------------------------
# bundled layouts

UMAZE_TEXT = """\
#####
#OOO#
###O#
#OOO#
#####"""

MEDIUM_TEXT = """\
########
#OO##OO#
#OO#OOO#
##OOO###
#OO#OOO#
#O#OO#O#
#OOO#OO#
########"""

LARGE_TEXT = """\
############
#OOOO#OOOOO#
#O##O#O#O#O#
#OOOOOO#OOO#
#O####O###O#
#OO#O#OOOOO#
##O#O#O#O###
#OO#OOO#OOO#
############"""

BUNDLED_MAZES = {"umaze": UMAZE_TEXT, "medium": MEDIUM_TEXT, "large": LARGE_TEXT}

# Episode step caps for the bundled layouts.
BUNDLED_MAX_STEPS = {"umaze": 300, "medium": 600, "large": 800}


def load_maze(name_or_path: str) -> MazeSpec:
    """Load a bundled layout by name, or parse a maze text file by path."""
    if name_or_path in BUNDLED_MAZES:
        return parse_maze(BUNDLED_MAZES[name_or_path], name=name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        raise InvalidLayout(
            f"unknown maze {name_or_path!r}: not a bundled name "
            f"({', '.join(sorted(BUNDLED_MAZES))}) and no such file"
        )
    return parse_maze(path.read_text(), name=path.stem)


def default_env_config(maze: MazeSpec | str, **overrides) -> EnvConfig:
    """EnvConfig with the bundled step cap for a named layout."""
    name = maze if isinstance(maze, str) else maze.name
    cfg = {"max_episode_steps": BUNDLED_MAX_STEPS.get(name, 600)}
    cfg.update(overrides)
    return EnvConfig(**cfg)


# ---------------------------------------------------------------------------
# geometry helpers


def cell_center(cell: tuple[int, int]) -> np.ndarray:
    r, c = cell
    return np.array([c + 0.5, r + 0.5], dtype=np.float64)


def cell_of(point: np.ndarray) -> tuple[int, int]:
    x, y = float(point[0]), float(point[1])
    return (int(np.floor(y)), int(np.floor(x)))


def wall_clearance(maze: MazeSpec, point: np.ndarray) -> float:
    """Euclidean distance from a point to the nearest wall-cell rectangle."""
    walls = maze.wall_cells()
    x, y = float(point[0]), float(point[1])
    cx = np.clip(x, walls[:, 1], walls[:, 1] + 1.0)
    cy = np.clip(y, walls[:, 0], walls[:, 0] + 1.0)
    return float(np.sqrt((x - cx) ** 2 + (y - cy) ** 2).min())


def in_free_space(maze: MazeSpec, point: np.ndarray, margin: float) -> bool:
    """True when the point is inside the grid with clearance >= margin.

    Clearance uses the per-axis (square agent) metric that the dynamics
    enforce, which is conservative relative to Euclidean clearance.
    """
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x <= maze.cols and 0.0 <= y <= maze.rows):
        return False
    walls = maze.wall_cells()
    inside_x = (walls[:, 1] - margin < x) & (x < walls[:, 1] + 1.0 + margin)
    inside_y = (walls[:, 0] - margin < y) & (y < walls[:, 0] + 1.0 + margin)
    return not bool(np.any(inside_x & inside_y))


def validate_task(maze: MazeSpec, cfg: EnvConfig, task: TaskSpec) -> None:
    for label, point in (("start", task.start), ("goal", task.goal)):
        if not in_free_space(maze, point, cfg.agent_radius):
            raise InvalidTask(f"task {label} {point.tolist()} is not in free space")
    if task.coin is not None and not in_free_space(maze, task.coin, cfg.agent_radius):
        raise InvalidTask(f"task coin {task.coin.tolist()} is not in free space")


# ---------------------------------------------------------------------------
# dynamics

_AXIS_EPS = 1e-9


def _slide_axis(maze: MazeSpec, radius: float, x: float, y: float, axis: int, delta: float):
    """Move one coordinate by delta, stopping at the first inflated wall face.

    Returns (new_coordinate, blocked). `axis` 0 moves x (walls keyed by column),
    axis 1 moves y (walls keyed by row).
    """
    if delta == 0.0:
        return (x if axis == 0 else y), False
    walls = maze.wall_cells()
    if axis == 0:
        move_from, cross = x, y
        wall_lo = walls[:, 1].astype(np.float64)
        cross_lo = walls[:, 0].astype(np.float64)
    else:
        move_from, cross = y, x
        wall_lo = walls[:, 0].astype(np.float64)
        cross_lo = walls[:, 1].astype(np.float64)
    overlap = (cross_lo - radius < cross) & (cross < cross_lo + 1.0 + radius)
    target = move_from + delta
    if delta > 0:
        faces = wall_lo[overlap] - radius
        blocking = faces[(faces >= move_from - _AXIS_EPS) & (faces < target)]
        if blocking.size:
            return float(blocking.min()), True
    else:
        faces = wall_lo[overlap] + 1.0 + radius
        blocking = faces[(faces <= move_from + _AXIS_EPS) & (faces > target)]
        if blocking.size:
            return float(blocking.max()), True
    return target, False


def step_detailed(maze: MazeSpec, cfg: EnvConfig, state: EnvState, action: np.ndarray):
    """Semi-implicit Euler step with per-axis wall stopping.

    Returns (next_state, collided) where `collided` marks a step whose motion
    was blocked by a wall on either axis.
    """
    action = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -cfg.a_max, cfg.a_max)
    vel = np.clip(state.velocity + action * cfg.dt, -cfg.v_max, cfg.v_max)
    x, y = float(state.position[0]), float(state.position[1])
    new_x, hit_x = _slide_axis(maze, cfg.agent_radius, x, y, 0, float(vel[0]) * cfg.dt)
    new_y, hit_y = _slide_axis(maze, cfg.agent_radius, new_x, y, 1, float(vel[1]) * cfg.dt)
    if hit_x:
        vel[0] = 0.0
    if hit_y:
        vel[1] = 0.0
    return EnvState(np.array([new_x, new_y]), vel), (hit_x or hit_y)


def step(maze: MazeSpec, cfg: EnvConfig, state: EnvState, action: np.ndarray) -> EnvState:
    """Deterministic environment transition; actions are clamped, never rejected."""
    return step_detailed(maze, cfg, state, action)[0]


def inverse_dynamics(cfg: EnvConfig, state: EnvState, next_state: EnvState) -> np.ndarray:
    """Action recovering the velocity change between two states, clamped to +-a_max.

    Exact inverse of `step`'s velocity update whenever no clamp or collision fired.
    """
    accel = (next_state.velocity - state.velocity) / cfg.dt
    return np.clip(accel, -cfg.a_max, cfg.a_max)


def pd_controller(
    cfg: EnvConfig, state: EnvState, waypoint: np.ndarray, kp: float, kd: float
) -> np.ndarray:
    """Proportional-derivative acceleration toward a waypoint, clamped to +-a_max."""
    if kp <= 0 or kd < 0:
        raise InvalidConfig("pd gains require kp > 0 and kd >= 0")
    waypoint = np.asarray(waypoint, dtype=np.float64).reshape(2)
    accel = kp * (waypoint - state.position) - kd * state.velocity
    return np.clip(accel, -cfg.a_max, cfg.a_max)


# ---------------------------------------------------------------------------
# shortest paths


def bfs_path(
    maze: MazeSpec, start: tuple[int, int], goal: tuple[int, int]
) -> list[tuple[int, int]]:
    """Shortest 4-connected cell path, ties broken by the fixed N,E,S,W probe order."""
    if maze.cells[start] or maze.cells[goal]:
        raise InfeasibleTask(f"start {start} or goal {goal} is a wall cell")
    if start == goal:
        return [start]
    parent = {start: None}
    queue = [start]
    while queue:
        nxt = []
        for r, c in queue:
            for dr, dc in NEIGHBOR_ORDER:
                cell = (r + dr, c + dc)
                if (
                    0 <= cell[0] < maze.rows
                    and 0 <= cell[1] < maze.cols
                    and not maze.cells[cell]
                    and cell not in parent
                ):
                    parent[cell] = (r, c)
                    if cell == goal:
                        path = [cell]
                        while parent[path[-1]] is not None:
                            path.append(parent[path[-1]])
                        return path[::-1]
                    nxt.append(cell)
        queue = nxt
    raise InfeasibleTask(f"no path from {start} to {goal}")


def bfs_distances(maze: MazeSpec, start: tuple[int, int]) -> dict:
    """Cell -> shortest path length (in moves) from `start`."""
    dist = {start: 0}
    queue = [start]
    while queue:
        nxt = []
        for r, c in queue:
            for dr, dc in NEIGHBOR_ORDER:
                cell = (r + dr, c + dc)
                if (
                    0 <= cell[0] < maze.rows
                    and 0 <= cell[1] < maze.cols
                    and not maze.cells[cell]
                    and cell not in dist
                ):
                    dist[cell] = dist[(r, c)] + 1
                    nxt.append(cell)
        queue = nxt
    return dist


def all_pair_distances(maze: MazeSpec) -> dict:
    """(cell_a, cell_b) -> BFS moves, over unordered distinct free-cell pairs."""
    free = maze.free_cells()
    out = {}
    for i, a in enumerate(free):
        dist = bfs_distances(maze, a)
        for b in free[i + 1 :]:
            out[(a, b)] = dist[b]
    return out


# ---------------------------------------------------------------------------
# expert data

DEFAULT_KP = 10.0
DEFAULT_KD = 3.0
DEFAULT_SWITCH_RADIUS = 0.3
_START_JITTER = 0.25


def _at_goal(state: EnvState, goal: np.ndarray, radius: float) -> bool:
    return float(np.linalg.norm(state.position - goal)) <= radius


def track_waypoints(
    maze: MazeSpec,
    cfg: EnvConfig,
    start: EnvState,
    waypoints: np.ndarray,
    goal: np.ndarray,
    kp: float = DEFAULT_KP,
    kd: float = DEFAULT_KD,
    switch_radius: float = DEFAULT_SWITCH_RADIUS,
    max_steps: int | None = None,
    stop_at_goal: bool = True,
):
    """Follow a waypoint sequence with PD control.

    With stop_at_goal the episode ends at the first goal arrival (expert data
    generation); otherwise it runs for max_steps and the controller latches
    onto the goal once reached instead of chasing further waypoints.

    Returns (states, actions, collisions, reached). `states` has one more row
    than `actions`; `collisions` counts blocked steps.
    """
    waypoints = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
    max_steps = cfg.max_episode_steps if max_steps is None else max_steps
    state = start
    states = [state.as_vector()]
    actions: list[np.ndarray] = []
    collisions = 0
    wp_idx = 0
    reached = _at_goal(state, goal, cfg.goal_radius)
    for _ in range(max_steps):
        if stop_at_goal and reached:
            break
        if reached:
            target = goal
        else:
            while (
                wp_idx < len(waypoints) - 1
                and float(np.linalg.norm(state.position - waypoints[wp_idx])) <= switch_radius
            ):
                wp_idx += 1
            target = waypoints[wp_idx]
        action = pd_controller(cfg, state, target, kp, kd)
        state, hit = step_detailed(maze, cfg, state, action)
        collisions += int(hit)
        actions.append(action)
        states.append(state.as_vector())
        if _at_goal(state, goal, cfg.goal_radius):
            reached = True
    return np.array(states), np.array(actions).reshape(len(actions), 2), collisions, reached


def random_free_point(
    maze: MazeSpec, cfg: EnvConfig, rng: np.random.Generator, jitter: float = _START_JITTER
) -> np.ndarray:
    free = maze.free_cells()
    cell = free[int(rng.integers(len(free)))]
    return cell_center(cell) + rng.uniform(-jitter, jitter, size=2)


def plan_waypoints(maze: MazeSpec, start_pos: np.ndarray, goal_pos: np.ndarray) -> np.ndarray:
    """Cell-center waypoints along the BFS path, ending exactly at the goal point."""
    path = bfs_path(maze, cell_of(start_pos), cell_of(goal_pos))
    pts = [cell_center(cell) for cell in path[1:]]
    pts.append(np.asarray(goal_pos, dtype=np.float64))
    return np.array(pts).reshape(-1, 2)


def generate_expert(
    maze: MazeSpec,
    cfg: EnvConfig,
    n: int,
    seed: int,
    kp: float = DEFAULT_KP,
    kd: float = DEFAULT_KD,
    switch_radius: float = DEFAULT_SWITCH_RADIUS,
) -> list[Trajectory]:
    """Generate n goal-reaching PD-tracked episodes on random start/goal pairs.

    Episodes that fail to reach their goal within the step cap are resampled;
    the output is deterministic given (maze, cfg, n, seed).
    """
    from .config import rng_stream

    if n < 1:
        raise InvalidConfig("n must be >= 1")
    episodes: list[Trajectory] = []
    for index in range(n):
        for attempt in range(1000):
            rng = rng_stream(seed, "expert", index, attempt)
            start_pos = random_free_point(maze, cfg, rng)
            goal_pos = random_free_point(maze, cfg, rng)
            waypoints = plan_waypoints(maze, start_pos, goal_pos)
            states, actions, _, reached = track_waypoints(
                maze, cfg, EnvState.at_rest(start_pos), waypoints, goal_pos,
                kp=kp, kd=kd, switch_radius=switch_radius,
            )
            if reached:
                episodes.append(Trajectory.from_rollout(states, actions))
                break
        else:
            raise InfeasibleTask(f"episode {index}: no successful rollout in 1000 attempts")
    return episodes


def extend_with_hold(
    maze: MazeSpec,
    cfg: EnvConfig,
    traj: Trajectory,
    target_rows: int,
    kp: float = DEFAULT_KP,
    kd: float = DEFAULT_KD,
) -> Trajectory:
    """Pad a trajectory to `target_rows` by PD-holding at its final position.

    The padding is simulated through `step`, so the extended trajectory stays
    dynamics-consistent. Trajectories already long enough are returned as-is.
    """
    if traj.horizon >= target_rows:
        return traj
    state = EnvState.from_vector(traj.states[-1])
    hold_point = traj.positions[-1].copy()
    extra = target_rows - traj.horizon
    states = [traj.states.copy()]
    actions = [traj.actions[:-1].copy()] if traj.horizon > 1 else [np.zeros((0, 2))]
    new_states, new_actions = [], []
    for _ in range(extra):
        action = pd_controller(cfg, state, hold_point, kp, kd)
        state = step(maze, cfg, state, action)
        new_actions.append(action)
        new_states.append(state.as_vector())
    all_states = np.vstack([states[0]] + [np.array(new_states)])
    all_actions = np.vstack([actions[0]] + [np.array(new_actions)])
    return Trajectory.from_rollout(all_states, all_actions)
