"""Exception types raised across the package."""


class PatchSlamError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(PatchSlamError):
    """A point or patch has depth at or below the numerical floor."""


class BehindCamera(PatchSlamError):
    """A reprojected patch cell landed behind the target camera (strict mode only)."""


class InconsistentFrameId(PatchSlamError):
    """A patch was handed to a frame it does not belong to."""


class IndexOutOfRange(PatchSlamError):
    """A frame or patch index does not exist in the graph."""


class NoCounterpartPatch(PatchSlamError):
    """An edge cannot be flipped because the target frame has no co-visible patch."""


class SingularSystem(PatchSlamError):
    """A linear system stayed singular after damping escalation."""


class InsufficientParallax(PatchSlamError):
    """Triangulation dropped every keypoint (degenerate baseline or geometry)."""


class DegenerateConfiguration(PatchSlamError):
    """Point sets are too few, collinear or coincident for alignment."""


class NoConsensus(PatchSlamError):
    """RANSAC found no model with enough inliers."""


class NoAssociations(PatchSlamError):
    """Two trajectories share no timestamps within the association gate."""


class InfeasibleVisibility(PatchSlamError):
    """A synthetic frame sees fewer landmarks than the requested patch count."""


class ConfigError(PatchSlamError):
    """A run configuration is malformed or contains unknown keys."""


class ParseError(PatchSlamError):
    """A text fixture could not be parsed; carries file path and line number."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif path is not None:
            where += " "
        super().__init__(where + message)
