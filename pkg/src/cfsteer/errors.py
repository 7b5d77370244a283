"""Exception types shared across the package."""


class CfsteerError(Exception):
    """Base class for all package errors."""


class ConfigError(CfsteerError, ValueError):
    """Invalid configuration value.

    ``field`` names the offending configuration field when known.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)


class InputError(CfsteerError, ValueError):
    """A tensor, image or argument has the wrong shape, range or content."""


class NumericalError(CfsteerError, ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class TrainingError(CfsteerError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class MissingArtifactError(CfsteerError, FileNotFoundError):
    """A required trained artifact is absent and training on demand is off."""
