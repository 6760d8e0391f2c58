"""Exception hierarchy shared by all modules."""


class VoodError(Exception):
    """Base class for every error raised by this package."""


class DegenerateFeature(VoodError, ValueError):
    """Feature vector has (near) zero sample standard deviation."""


class ShapeMismatch(VoodError, ValueError):
    pass


class StepOutOfRange(VoodError, IndexError):
    pass


class InvalidPercentage(VoodError, ValueError):
    pass


class EmptyMask(VoodError, ValueError):
    pass


class NonDifferentiableModel(VoodError, RuntimeError):
    """The model output does not depend differentiably on its input."""


class EmptySet(VoodError, ValueError):
    pass


class InvalidSpec(VoodError, ValueError):
    pass


class DataError(VoodError):
    """Base for dataset ingestion problems (CLI exit code 3)."""


class MissingDirectory(DataError, FileNotFoundError):
    pass


class UnreadableImage(DataError, OSError):
    pass


class ConfigParseError(VoodError, ValueError):
    """Config file could not be parsed; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericFailure(VoodError, FloatingPointError):
    """Training produced a non-finite loss."""
