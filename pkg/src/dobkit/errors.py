"""Exception and warning types raised by dobkit."""


class DobkitError(Exception):
    """Base class for dobkit errors."""


class ConfigError(DobkitError, ValueError):
    """A configuration value or file is invalid."""


class SingularMass(DobkitError, ArithmeticError):
    """Mass matrix condition number exceeds the admissible cap."""


class NonFinite(DobkitError, ArithmeticError):
    """A function evaluation produced a non-finite value."""


class InnovationSingular(DobkitError, ArithmeticError):
    """Innovation covariance ``H P H^T + R`` is numerically singular."""


class NotPD(DobkitError, ArithmeticError):
    """Cholesky factorization failed; a covariance lost positive definiteness."""


class TooShort(DobkitError, ValueError):
    """Series too short for the requested zero-phase filter."""


class StepError(DobkitError):
    """Wraps an observer/dynamics failure with the step index where it happened."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"step {step}: {type(cause).__name__}: {cause}")


class FixedPointDiverged(RuntimeWarning):
    """MKC fixed-point loop hit ``max_iter`` far from convergence."""


class DegenerateLikelihood(RuntimeWarning):
    """Every IMM model likelihood underflowed; probabilities were held."""
