"""Exception taxonomy shared by every module.

Each class carries the process exit code the CLI maps it to:
2 = configuration error, 3 = numerical failure, 4 = I/O or format error.
"""


class FdaError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigError(FdaError):
    """Invalid configuration, missing stage inputs, bad CLI usage."""

    exit_code = 2


class MissingAnchorsError(ConfigError):
    """Adaptation requested for a (task, block) pair with no anchor set."""


class IoError(FdaError):
    """Filesystem failure while reading or writing an artifact."""

    exit_code = 4


class FormatViolationError(IoError):
    """Bad magic, truncated payload, CRC mismatch, or shape inconsistency."""


class NumericalError(FdaError):
    """Numerical failure during computation."""


class ShapeMismatchError(NumericalError):
    """Operands have incompatible shapes."""


class DimensionMismatchError(ShapeMismatchError):
    """Vector length does not match the matrix dimension it pairs with."""


class ZeroNormError(NumericalError):
    """An operand that must have positive norm is (numerically) zero."""


class ConvergenceFailureError(NumericalError):
    """An iterative scheme failed to meet its tolerance within its cap."""


class UnboundVariableError(NumericalError):
    """Expression evaluation met a variable missing from the binding."""


class NotScalarError(NumericalError):
    """Differentiation target is not a 1x1 expression."""


class ArchitectureMismatchError(NumericalError):
    """Two checkpoints or task vectors disagree on the block layout."""


class InvalidSigmaError(NumericalError):
    """Scaled-Gaussian initialization requires sigma > 0."""


class ZeroTaskVectorError(NumericalError):
    """The block task vector is all-zero; no anchors can be constructed."""


class DegenerateAnchorError(NumericalError):
    """Anchor violates x != 0 or delta_w @ x != 0."""


class DegenerateStartError(NumericalError):
    """Dynamics simulation started from the zero vector."""


class RankDeficientError(NumericalError):
    """Matrix required to be full rank is (numerically) rank deficient."""


class InvalidKError(NumericalError):
    """Subspace index k outside its valid range."""


class ZeroMatrixError(NumericalError):
    """Spectral analysis of an all-zero matrix."""


class ZeroDirectionError(NumericalError):
    """Projection of a zero direction vector is undefined."""
