"""
Error types raised by the numerical core.
Every failure named by a core operation has its own class so callers and the
stage wrapper can report the exact cause.
"""


class AmpLabError(Exception):
    """Base class for all errors raised by the core package"""


class InvalidDimensionError(AmpLabError, ValueError):
    """Dimension below the minimum an operation supports"""


class InvalidCorrelationError(AmpLabError, ValueError):
    """Correlation coefficient outside [-1, 1]"""


class InfeasibleDegreeError(AmpLabError, ValueError):
    """No d-regular simple graph exists for the requested (n, d)"""


class AsymmetricProfileError(AmpLabError, ValueError):
    """Correlation profile input is not symmetric"""


class DimensionMismatchError(AmpLabError, ValueError):
    """Operands disagree on n or on vector lengths"""


class UnattainableCorrelationError(AmpLabError, ValueError):
    """Requested pair correlation cannot be realized by the entry distribution"""


class InvalidCovarianceError(AmpLabError, ValueError):
    """Covariance matrix has an eigenvalue below the accepted tolerance"""


class PreconditionError(AmpLabError, ValueError):
    """Input does not satisfy the documented precondition"""


class MissingDensityEvolutionError(PreconditionError):
    """AMPZ or non-centered AMP started without a matching DE state"""


class DivergenceError(AmpLabError, ArithmeticError):
    """AMP iterate exceeded the divergence threshold"""

    def __init__(self, step: int, max_abs: float, threshold: float):
        self.step = step
        self.max_abs = max_abs
        self.threshold = threshold
        super().__init__(
            f"AMP diverged at step {step}: max |x| = {max_abs:.3e} > {threshold:.1e}"
        )


class ArityMismatchError(AmpLabError, ValueError):
    """Test function needs more iterates than available"""


class EmptySampleError(AmpLabError, ValueError):
    """Empty sample passed to a distributional distance"""


class ProvenanceMismatchError(AmpLabError, ValueError):
    """Trajectories compared across different matrices, seeds or activations"""


class BudgetExceededError(AmpLabError, ValueError):
    """Tree enumeration request beyond the desk-scale budget"""


class ZeroDiagonalRequiredError(AmpLabError, ValueError):
    """Operation requires a matrix with zero diagonal"""


class UnknownFamilyError(AmpLabError, ValueError):
    """Unknown activation, distribution or profile family"""


class InconsistentConfigError(AmpLabError, ValueError):
    """Runs combined in one report were produced by different configurations"""
