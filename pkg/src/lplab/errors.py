"""Exception types shared across the package."""


class LplabError(Exception):
    """Base class for all package errors."""


class DomainError(LplabError, ValueError):
    """A point lies outside a chart or an input is outside an operation's domain."""


class RangeError(LplabError, ValueError):
    """A scalar parameter (tau, p, c, rho, ...) is out of its admissible range."""


class CapabilityError(LplabError):
    """An operation needs a jet field or feature the background does not supply."""


class UnsupportedError(LplabError):
    """The operation is not defined for this background or parameter choice."""


class EscapeError(LplabError):
    """An integration left the chart domain.  ``state`` holds the last valid state."""

    def __init__(self, msg, s=None, state=None):
        super().__init__(msg)
        self.s = s
        self.state = state


class StiffnessError(LplabError):
    """Step size underflow in the adaptive integrator."""


class EnvelopeViolation(LplabError):
    """The s-speed exceeded the a priori speed envelope by a large factor."""


class NonConvergenceError(LplabError):
    """No start of the shooting solver converged."""

    def __init__(self, msg, best_residual=None):
        super().__init__(msg)
        self.best_residual = best_residual


class InternalBoundError(LplabError):
    """Explicit upper and lower action bounds are inconsistent."""


class ToleranceError(LplabError):
    """Quadrature or refinement failed to reach the requested tolerance."""


class FormulaViolation(LplabError, AssertionError):
    """Two independent evaluations of the same quantity disagree."""


class TruncationError(LplabError):
    """The quadrature tail bound cannot be met with the allowed radius."""


class SchemaError(LplabError, ValueError):
    """A run configuration or CSV file does not match its schema."""
