"""Exception hierarchy shared by all modules."""


class ScalimitError(Exception):
    """Base class for every error raised by the package."""


class DomainError(ScalimitError, ValueError):
    """An argument lies outside the domain of the operation."""


class ResourceError(ScalimitError):
    """A simulation would exceed its configured event budget."""


class AdmissibilityError(ScalimitError):
    """A control produced a negative death intensity."""

    def __init__(self, t, x, alpha, rate):
        self.t, self.x, self.alpha, self.rate = t, x, alpha, rate
        super().__init__(
            f"negative death intensity {rate:.6g} at t={t:.6g}, x={x:.6g}, alpha={alpha:.6g}"
        )


class CouplingError(ScalimitError):
    """The domination precondition of the thinning coupling failed."""

    def __init__(self, count, message):
        self.count = count
        super().__init__(f"{message} (population count {count})")


class BlowUpError(ScalimitError, OverflowError):
    """An exponential moment is infinite or beyond floating range."""


class NumericError(ScalimitError, ArithmeticError):
    """A solver produced a non-finite value."""


class ConfigError(ScalimitError):
    """Invalid solver or experiment configuration; ``path`` locates the field."""

    def __init__(self, message, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ContractionError(ScalimitError):
    """Picard iterates failed to contract."""
