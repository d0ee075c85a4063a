"""Exception hierarchy shared by all modules."""


class MetabayesError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgument(MetabayesError, ValueError):
    pass


class NumericalBlowup(MetabayesError, FloatingPointError):
    """A simulated state became non-finite."""

    def __init__(self, step, seed=None, message=None):
        self.step = int(step)
        self.seed = seed
        msg = message or f"non-finite state at step {self.step}"
        if seed is not None:
            msg += f" (seed {seed})"
        super().__init__(msg)


class NonConvexCutoff(MetabayesError, ValueError):
    pass


class NonMorse(MetabayesError, ValueError):
    pass


class NotMetastable(MetabayesError, ValueError):
    pass


class NonConvex(MetabayesError, ValueError):
    pass


class NonIdentifiable(MetabayesError, ValueError):
    pass


class InvalidExpansion(MetabayesError, ValueError):
    pass


class DegeneratePosterior(MetabayesError, FloatingPointError):
    pass


class AssumptionViolated(MetabayesError, ValueError):
    pass


class InfeasibleRegime(MetabayesError, RuntimeError):
    def __init__(self, message, predicted_mean=None):
        self.predicted_mean = predicted_mean
        super().__init__(message)


class TruncationError(MetabayesError, ArithmeticError):
    pass


class TruncationWarning(UserWarning):
    pass


class ApproximationWarning(UserWarning):
    """An asymptotic formula is being used outside its comfortable regime."""


class ApproximationError(MetabayesError, ArithmeticError):
    """Raised instead of ApproximationWarning in strict mode."""
