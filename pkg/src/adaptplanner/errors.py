"""Exception types shared across the package."""


class AdaptPlannerError(Exception):
    """Base class for all errors raised by this package."""


class MalformedMaze(AdaptPlannerError):
    """Maze text contains illegal characters or ragged rows."""


class InvalidLayout(AdaptPlannerError):
    """Maze grid violates a structural requirement (border, connectivity, size)."""


class InfeasibleTask(AdaptPlannerError):
    """No path exists between the requested start and goal."""


class InvalidTask(AdaptPlannerError):
    """Task start/goal/coin does not lie in free space."""


class InvalidConfig(AdaptPlannerError):
    """A configuration value is out of its legal range."""


class ShapeMismatch(AdaptPlannerError):
    """Array arguments do not have the shapes the operation requires."""


class NonFiniteLoss(AdaptPlannerError):
    """Training loss evaluated to NaN or infinity."""


class EmptyPool(AdaptPlannerError):
    """Training requested on a data pool with no entries."""


class NonDifferentiableReward(AdaptPlannerError):
    """Gradient requested for a reward that only exists as an indicator."""


class InvalidReference(AdaptPlannerError):
    """Score normalization references are degenerate (expert <= random)."""


class IoError(AdaptPlannerError):
    """A persistence read or write failed."""


class DigestMismatch(AdaptPlannerError):
    """Stored content digest does not match the file bytes."""


class VersionUnsupported(AdaptPlannerError):
    """File was written by a newer format version than this build reads."""


class SchemaMismatch(AdaptPlannerError):
    """Loaded data disagrees with the expected schema or dimensions."""
