"""Exception hierarchy shared by every stage of the pipeline."""


class ReidError(Exception):
    """Base class for all package errors."""


class ConfigError(ReidError, ValueError):
    pass


class DimensionError(ReidError, ValueError):
    pass


class ProjectionError(ReidError, ValueError):
    """A point lies at or behind the camera plane."""


class RenderError(ReidError, ValueError):
    pass


class InitializationError(ReidError, ValueError):
    pass


class UnderconstrainedError(ReidError, ValueError):
    pass


class MetricError(ReidError, ValueError):
    """A metric is undefined for the given input (e.g. nothing to score)."""


class BoundsError(ReidError, ValueError):
    pass


class EmptyChipError(ReidError, ValueError):
    pass


class GateError(ReidError, RuntimeError):
    """The species service failed or returned an unusable answer."""


class NoTripletError(ReidError, ValueError):
    pass


class DatasetError(ReidError, ValueError):
    pass


class InputError(ReidError, ValueError):
    pass


class StageError(ReidError, RuntimeError):
    """Raised by pipeline stages; the message carries the stage prefix."""

    def __init__(self, stage: str, message: str, exit_code: int = 1):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = exit_code
