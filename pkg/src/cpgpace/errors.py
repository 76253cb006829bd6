"""Exception hierarchy shared across the package.

Every error raised by the library derives from :class:`CpgPaceError` so
callers (and the CLI) can map failures onto exit codes without string
matching.
"""


class CpgPaceError(Exception):
    """Base class for all package errors."""


class ConfigError(CpgPaceError):
    """Invalid, missing or unparsable configuration input."""


class StabilityError(ConfigError):
    """Time step too large for the requested time constants."""


class DataError(CpgPaceError):
    """A recording or other data file is malformed or inconsistent."""


class SimulationRunError(CpgPaceError):
    """A simulation could not be completed (overflow, runaway spiking)."""


class NumericOverflowError(SimulationRunError):
    """State became non-finite during integration."""


class UnstableRhythmError(SimulationRunError):
    """The network rhythm is too irregular to measure."""


class ConvergenceError(CpgPaceError):
    """An iterative tuning loop ran out of iterations before meeting its target."""


class CalibrationError(CpgPaceError):
    """A fitted map or calibration is unusable (too few points, bad fit)."""
