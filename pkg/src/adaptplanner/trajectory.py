"""Trajectory container: the (rows x 6) grid of states and actions being planned over."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch

STATE_DIM = 4
ACTION_DIM = 2
WIDTH = STATE_DIM + ACTION_DIM

# column layout of one row: [x, y, vx, vy, ax, ay]
COLUMNS = ("x", "y", "vx", "vy", "ax", "ay")
POS_COLS = slice(0, 2)
VEL_COLS = slice(2, 4)
STATE_COLS = slice(0, STATE_DIM)
ACTION_COLS = slice(STATE_DIM, WIDTH)


@dataclass
class Trajectory:
    """A sequence of [state | action] rows, one row per environment tick."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != WIDTH:
            raise ShapeMismatch(
                f"trajectory values must be (rows, {WIDTH}), got {self.values.shape}"
            )
        if self.values.shape[0] < 1:
            raise ShapeMismatch("trajectory needs at least one row")
        if not np.all(np.isfinite(self.values)):
            raise ShapeMismatch("trajectory contains non-finite values")

    @property
    def horizon(self) -> int:
        """Number of rows (steps + 1)."""
        return self.values.shape[0]

    @property
    def states(self) -> np.ndarray:
        return self.values[:, STATE_COLS]

    @property
    def actions(self) -> np.ndarray:
        return self.values[:, ACTION_COLS]

    @property
    def positions(self) -> np.ndarray:
        return self.values[:, POS_COLS]

    @property
    def velocities(self) -> np.ndarray:
        return self.values[:, VEL_COLS]

    def copy(self) -> "Trajectory":
        return Trajectory(self.values.copy())

    @staticmethod
    def from_rollout(states: np.ndarray, actions: np.ndarray) -> "Trajectory":
        """Assemble from a state sequence and the actions applied at each state.

        `actions` may be one row shorter than `states`; the terminal row's
        action is then zero (nothing is executed from the last state).
        """
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape[0] == states.shape[0] - 1:
            actions = np.vstack([actions, np.zeros((1, ACTION_DIM))])
        if actions.shape[0] != states.shape[0]:
            raise ShapeMismatch(
                f"{states.shape[0]} states vs {actions.shape[0]} actions"
            )
        return Trajectory(np.hstack([states, actions]))
