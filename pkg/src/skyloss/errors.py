"""Exception hierarchy shared by all skyloss modules."""


class SkylossError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SkylossError, ValueError):
    """A parameter set is outside its valid range."""


class DomainError(SkylossError, ValueError):
    """A numeric argument lies outside the domain of a formula."""


class ConsistencyError(SkylossError, ValueError):
    """Inputs that must agree with each other (shapes, grids, altitudes) do not."""


class DegenerateInputError(SkylossError, ValueError):
    """Input carries no usable information, e.g. every receiver is indoors."""


class TrainingError(SkylossError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
