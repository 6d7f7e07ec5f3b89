"""Self-evolving diffusion planner for point-mass maze navigation."""

__version__ = "0.1.0"

from .errors import AdaptPlannerError
from .trajectory import Trajectory
from .maze import (
    EnvConfig,
    EnvState,
    MazeSpec,
    TaskSpec,
    generate_expert,
    load_maze,
    parse_maze,
    step,
)

__all__ = [
    "AdaptPlannerError",
    "Trajectory",
    "EnvConfig",
    "EnvState",
    "MazeSpec",
    "TaskSpec",
    "generate_expert",
    "load_maze",
    "parse_maze",
    "step",
    "__version__",
]
