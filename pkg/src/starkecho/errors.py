"""Exception types raised by the simulator."""


class StarkEchoError(Exception):
    """Base class for all simulator errors."""


class ConfigError(StarkEchoError, ValueError):
    """Invalid configuration value. ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NonPositiveWidth(ConfigError):
    pass


class GridTooNarrow(ConfigError):
    pass


class OutOfRange(StarkEchoError, ValueError):
    pass


class StepTooLarge(ConfigError):
    pass


class CalibrationDiverged(StarkEchoError, RuntimeError):
    pass


class DirectionMismatch(StarkEchoError, RuntimeError):
    pass


class GridMismatch(StarkEchoError, ValueError):
    pass


class ScheduleError(StarkEchoError, ValueError):
    pass


class TauTooSmall(ScheduleError):
    pass


class NoEchoFound(StarkEchoError, RuntimeError):
    pass


class TooThick(StarkEchoError, ValueError):
    pass


class ModeMismatch(StarkEchoError, ValueError):
    """Operation needs the other solver mode (linearized vs full Bloch)."""
