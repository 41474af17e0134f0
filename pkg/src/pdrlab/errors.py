"""Exception hierarchy shared by all pdrlab modules."""


class PdrError(Exception):
    """Base class for every error raised by pdrlab."""


class ConfigError(PdrError, ValueError):
    """Invalid configuration value. ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class EmptyInputError(PdrError, ValueError):
    pass


class MissingModalityError(PdrError, ValueError):
    pass


class MalformedStreamError(PdrError, ValueError):
    pass


class InsufficientDataError(PdrError, ValueError):
    pass


class SpecError(PdrError, ValueError):
    """Shape or channel mismatch between a network spec and its inputs."""


class AlignmentError(PdrError, ValueError):
    pass


class NumericError(PdrError, ArithmeticError):
    pass
