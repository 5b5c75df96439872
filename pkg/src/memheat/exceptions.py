"""Exception hierarchy.

Every error raised by the package derives from :class:`MemheatError`; the CLI
maps subclasses onto exit statuses.
"""


class MemheatError(Exception):
    pass


class DomainError(MemheatError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(MemheatError, ValueError):
    """A configuration value is missing, malformed or inconsistent."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class IllPosedError(MemheatError, ValueError):
    pass


class CoverageError(MemheatError):
    """The history buffer does not cover the interval a memory integral needs."""

    def __init__(self, start, stop):
        super().__init__(f"history missing interval [{start:.6g}, {stop:.6g}]")
        self.interval = (start, stop)


class ControlClassError(MemheatError, ValueError):
    pass


class BlowUpError(MemheatError, FloatingPointError):
    """Non-finite state produced by a time stepper."""

    def __init__(self, step, time, last_diagnostics=None):
        super().__init__(f"non-finite state at step {step} (t={time:.6g})")
        self.step = step
        self.time = time
        self.last_diagnostics = last_diagnostics or {}


class ConsistencyError(MemheatError):
    pass
