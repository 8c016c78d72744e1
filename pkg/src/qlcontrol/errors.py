"""Exception types shared across the package."""


class QLControlError(Exception):
    """Base class for all package-specific failures."""


class RegionUnsupported(QLControlError):
    """No admissible auxiliary-function construction for this control region."""


class GridTooCoarse(QLControlError):
    """Strict inclusions between region, subregion and domain collapse on this grid."""


class TimeNodeOnBoundary(QLControlError):
    """Weight evaluation requested at t = 0 or t = T, where the weights are singular."""


class NonpositiveCoefficient(QLControlError):
    """Diffusion coefficient is not strictly positive on the grid."""


# solve_linearized reports coefficient failures under this name
CoefficientNonpositive = NonpositiveCoefficient


class BadExponent(QLControlError):
    """Norm exponent outside [1, inf]."""


class BadExponents(QLControlError):
    """Inadmissible (dimension, target exponent) pair for the exponent ladder."""


class IntervalOutsideRange(QLControlError):
    """Globalization interval is not contained in the model's valid range."""


class NewtonDiverged(QLControlError):
    """Newton iteration failed to reach tolerance."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class LinearSolveStalled(QLControlError):
    """Conjugate gradient failed to reach the requested residual."""


class MaxIterations(QLControlError):
    """Iteration cap reached before the requested tolerance."""


class NoConvergence(QLControlError):
    """Outer fixed-point loop failed to contract; the trace is attached."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class FitDegenerate(QLControlError):
    """Fewer than three usable points for a regression fit."""


class DiagnosticViolation(QLControlError):
    """A structural inequality that must hold unconditionally was violated."""


class ConfigInvalid(QLControlError):
    """Experiment configuration failed validation."""

    def __init__(self, field, reason):
        super().__init__(f"config field '{field}': {reason}")
        self.field = field
        self.reason = reason
