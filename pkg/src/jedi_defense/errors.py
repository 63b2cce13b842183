"""Exception hierarchy shared across the package."""


class JediError(Exception):
    """Base class for all errors raised by this package."""


class PlacementError(JediError, ValueError):
    """A patch does not fit inside the target image at the requested location."""


class FormatError(JediError, ValueError):
    """Pixel layout or channel count is not what an operation expects."""


class UnsupportedFormatError(FormatError):
    pass


class CorruptImageError(JediError, OSError):
    pass


class GeometryError(JediError, ValueError):
    pass


class InsufficientDataError(JediError, ValueError):
    """Too few samples (windows, records, ...) to produce a stable estimate."""


class TrainingError(JediError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ModelError(JediError, ValueError):
    pass


class UndefinedRateError(JediError, ZeroDivisionError):
    """A metric's denominator is empty."""


class OracleError(JediError, RuntimeError):
    def __init__(self, message: str, sample_id: int | str | None = None):
        super().__init__(message)
        self.sample_id = sample_id


class StageError(JediError):
    """A defense pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
