"""Reward functions, returns, and the trajectory-space gradients that steer
guided sampling. Sparse rewards never produce gradients here; they become
inpaint constraints or indicator values."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import GuidanceSpec, InpaintConstraint, Normalizer
from .errors import InvalidConfig, NonDifferentiableReward
from .maze import TaskSpec
from .trajectory import STATE_DIM, WIDTH, Trajectory


# ---------------------------------------------------------------------------
# reward functions


class RewardFn:
    """Row-wise reward R(s_t, a_t). Subclasses say whether they differentiate."""

    differentiable = True

    def values(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grads(self, states: np.ndarray, actions: np.ndarray):
        """(dR/ds, dR/da) per row; only called when differentiable."""
        raise NotImplementedError


@dataclass
class SparseGoal(RewardFn):
    """1 within goal_radius of the goal, else 0. Indicator only: no gradient."""

    goal: np.ndarray
    radius: float
    differentiable = False

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(2)
        if self.radius <= 0:
            raise InvalidConfig("SparseGoal radius must be positive")

    def values(self, states, actions):
        dist = np.linalg.norm(states[:, :2] - self.goal[None, :], axis=1)
        return (dist <= self.radius).astype(np.float64)

    def grads(self, states, actions):
        raise NonDifferentiableReward(
            "sparse goal rewards are handled by inpainting, not gradients"
        )


@dataclass
class StepPenalty(RewardFn):
    """Constant -c per row; its gradient is identically zero."""

    cost: float = 1.0

    def values(self, states, actions):
        return np.full(states.shape[0], -self.cost)

    def grads(self, states, actions):
        return np.zeros_like(states), np.zeros_like(actions)


@dataclass
class QuadraticToPoint(RewardFn):
    """-weight * ||position - center||^2; the smooth attraction reward."""

    center: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)

    def values(self, states, actions):
        delta = states[:, :2] - self.center[None, :]
        return -self.weight * (delta**2).sum(axis=1)

    def grads(self, states, actions):
        ds = np.zeros_like(states)
        ds[:, :2] = -2.0 * self.weight * (states[:, :2] - self.center[None, :])
        return ds, np.zeros_like(actions)


@dataclass
class Composite(RewardFn):
    """Sum of member rewards; differentiable only if every member is."""

    members: list = field(default_factory=list)

    @property
    def differentiable(self):
        return all(m.differentiable for m in self.members)

    def values(self, states, actions):
        total = np.zeros(states.shape[0])
        for m in self.members:
            total += m.values(states, actions)
        return total

    def grads(self, states, actions):
        ds = np.zeros_like(states)
        da = np.zeros_like(actions)
        for m in self.members:
            if not m.differentiable:
                raise NonDifferentiableReward(f"composite member {m} has no gradient")
            gs, ga = m.grads(states, actions)
            ds += gs
            da += ga
        return ds, da


# ---------------------------------------------------------------------------
# returns and gradients


def _rows(tau) -> np.ndarray:
    return tau.values if isinstance(tau, Trajectory) else np.asarray(tau, dtype=np.float64)


def return_of(tau, reward: RewardFn, gamma: float) -> float:
    """Discounted return sum_t gamma^t R(s_t, a_t) over denormalized rows."""
    if not (0.0 < gamma <= 1.0):
        raise InvalidConfig("gamma must lie in (0, 1]")
    rows = _rows(tau)
    vals = reward.values(rows[:, :STATE_DIM], rows[:, STATE_DIM:])
    discounts = gamma ** np.arange(rows.shape[0])
    return float((discounts * vals).sum())


def grad_return(tau, reward: RewardFn, gamma: float, normalizer: Normalizer | None = None) -> np.ndarray:
    """Row-wise gamma^t-weighted reward gradient with respect to [s_t | a_t].

    With a normalizer the gradient is expressed in normalized trajectory
    coordinates (chain rule through the affine map); otherwise in data units.
    """
    if not (0.0 < gamma <= 1.0):
        raise InvalidConfig("gamma must lie in (0, 1]")
    if not reward.differentiable:
        raise NonDifferentiableReward(f"{type(reward).__name__} rewards cannot be differentiated")
    rows = _rows(tau)
    ds, da = reward.grads(rows[:, :STATE_DIM], rows[:, STATE_DIM:])
    grid = np.hstack([ds, da])
    grid *= (gamma ** np.arange(rows.shape[0]))[:, None]
    if normalizer is not None:
        grid *= normalizer.grad_scale()[None, :]
    return grid


# ---------------------------------------------------------------------------
# coin guidance


@dataclass
class CoinGuidance:
    """Smoothed p-norm pull toward an auxiliary point s_c; scale is negative
    so the guided shift moves states toward the coin."""

    coin: np.ndarray
    norm_p: int = 2
    smoothing: float = 1e-6
    scale: float = -100.0

    def __post_init__(self):
        self.coin = np.asarray(self.coin, dtype=np.float64).reshape(2)
        if self.norm_p not in (1, 2):
            raise InvalidConfig("norm_p must be 1 or 2")
        if self.smoothing <= 0:
            raise InvalidConfig("smoothing must be positive to keep the gradient defined")


def coin_gradient(tau, cg: CoinGuidance, normalizer: Normalizer | None = None):
    """Value sum_t smooth_norm_p(pos_t - s_c) and its gradient grid.

    The gradient lives in the position columns only; with a normalizer it is
    expressed in normalized coordinates.
    """
    rows = _rows(tau)
    delta = rows[:, :2] - cg.coin[None, :]
    eps2 = cg.smoothing**2
    grid = np.zeros_like(rows)
    if cg.norm_p == 2:
        norms = np.sqrt((delta**2).sum(axis=1) + eps2)
        value = float(norms.sum())
        grid[:, :2] = delta / norms[:, None]
    else:
        comps = np.sqrt(delta**2 + eps2)
        value = float(comps.sum())
        grid[:, :2] = delta / comps
    if normalizer is not None:
        grid *= normalizer.grad_scale()[None, :]
    return value, grid


# ---------------------------------------------------------------------------
# conditioning and indicators


def build_inpaint_constraints(
    task: TaskSpec,
    horizon: int,
    normalizer: Normalizer,
    pin_coin: bool = False,
) -> tuple:
    """Start and goal rows fixed at rest, optionally pinning the coin position.

    Row 0 and row horizon-1 carry the normalized [position, zero velocity]
    states. A pinned coin occupies the position columns of the middle row,
    since the final row already belongs to the goal.
    """
    if horizon < 2:
        raise InvalidConfig("conditioning needs at least 2 rows")
    template = np.zeros(WIDTH)

    def state_values(position):
        row = template.copy()
        row[:2] = position
        return tuple(normalizer.normalize(row)[:STATE_DIM])

    constraints = [
        InpaintConstraint(row=0, col_start=0, col_stop=STATE_DIM, values=state_values(task.start)),
        InpaintConstraint(
            row=horizon - 1, col_start=0, col_stop=STATE_DIM, values=state_values(task.goal)
        ),
    ]
    if pin_coin:
        if task.coin is None:
            raise InvalidConfig("pin_coin requires a task with a coin")
        constraints.append(
            InpaintConstraint(
                row=(horizon - 1) // 2,
                col_start=0,
                col_stop=2,
                values=state_values(task.coin)[:2],
            )
        )
    return tuple(constraints)


def goal_indicator(tau, goal: np.ndarray, radius: float) -> int:
    """1 iff some row's position enters the closed ball around the goal."""
    if radius <= 0:
        raise InvalidConfig("radius must be positive")
    rows = _rows(tau)
    goal = np.asarray(goal, dtype=np.float64).reshape(2)
    dist = np.linalg.norm(rows[:, :2] - goal[None, :], axis=1)
    return int(bool((dist <= radius).any()))


def guidance_for_task(
    task: TaskSpec,
    horizon: int,
    normalizer: Normalizer,
    alpha: float = 0.0,
    gamma: float = 1.0,
    coin_norm: int = 2,
    coin_smoothing: float = 1e-6,
    pin_coin: bool = False,
    reward: RewardFn | None = None,
) -> GuidanceSpec:
    """GuidanceSpec for one navigation task: start/goal inpainting always, coin
    gradient guidance when the task has a coin and alpha is nonzero."""
    inpaint = build_inpaint_constraints(task, horizon, normalizer, pin_coin=pin_coin)
    if reward is not None:
        return GuidanceSpec(
            mode="return", scale=alpha, gamma=gamma, inpaint=inpaint, reward=reward
        )
    if task.coin is not None and alpha != 0.0:
        coin = CoinGuidance(task.coin, norm_p=coin_norm, smoothing=coin_smoothing, scale=alpha)
        return GuidanceSpec(mode="coin", scale=alpha, gamma=gamma, inpaint=inpaint, coin=coin)
    return GuidanceSpec(mode="none", scale=0.0, gamma=gamma, inpaint=inpaint)
