"""Exception hierarchy shared by every gcmvs module."""


class GcmvsError(RuntimeError):
    """Root of all errors raised by gcmvs."""


class PreconditionError(GcmvsError, ValueError):
    """An argument violates an operation's precondition (e.g. non-positive depth)."""


class ConfigError(GcmvsError, ValueError):
    """Invalid configuration: bad window size, kernel shape, stage settings, ..."""

    def __init__(self, message: str, problems=None):
        super().__init__(message)
        self.problems = list(problems or [])


class ShapeError(GcmvsError, ValueError):
    """Array shapes or scales that must agree do not."""


class SizeError(GcmvsError, ValueError):
    """Input too small for the requested operation."""


class FormatError(GcmvsError, ValueError):
    """A file could not be parsed in its documented format."""


class DegenerateRayError(GcmvsError):
    """A plane is (nearly) parallel to the ray through a pixel."""


class DegenerateViewError(GcmvsError):
    """A camera cannot see the scene primitive (e.g. it sits inside a sphere)."""


class DegenerateRigError(GcmvsError, ValueError):
    """A camera rig cannot be built from the given parameters."""


class CoverageError(GcmvsError):
    """Some pixel is not covered by any normal patch."""


class UndefinedLossError(GcmvsError):
    """Every pixel was masked out of the loss."""


class EmptyMetricsError(GcmvsError):
    """Prediction and ground truth share no valid pixel."""


class InsufficientViewsError(GcmvsError, ValueError):
    """An operation needs more views than were given."""


class ComparisonError(GcmvsError):
    """Ablation runs are not comparable (different scenes)."""


class UsageError(GcmvsError, ValueError):
    """Bad command-line usage."""
