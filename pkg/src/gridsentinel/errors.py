"""
Exception hierarchy for gridsentinel.

Every error carries the process exit code the CLI returns for it.
"""


class GridSentinelError(RuntimeError):
    """Base class for all gridsentinel failures."""

    exit_code = 1


class ConfigError(GridSentinelError):
    """Invalid or unknown configuration, or unusable label sets."""

    exit_code = 2


class PreconditionError(GridSentinelError):
    """A stage was asked to run on inputs it cannot accept."""

    exit_code = 3


class NumericError(GridSentinelError):
    """A non-finite value appeared in a computation."""

    exit_code = 4

    def __init__(self, message, op=None, scope=None):
        where = " / ".join(part for part in (scope, op) if part)
        super().__init__(f"{message} (at {where})" if where else message)
        self.op = op
        self.scope = scope


class GradCheckError(NumericError):
    """The checked function was not finite around the requested point."""


class DimensionError(GridSentinelError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 4


class DomainError(GridSentinelError, ValueError):
    """An input lies outside the domain of the requested function."""

    exit_code = 4


class ScheduleError(ConfigError):
    """The attack coverage target cannot be met with the given horizon."""


class NotAClientError(PreconditionError):
    """A wired node was used where a wireless client is required."""


class AggregationError(PreconditionError):
    """Client updates disagree on the parameter manifest."""


class CheckpointError(PreconditionError):
    """A checkpoint does not match the expected parameter manifest."""


class ReportError(PreconditionError):
    """Metrics are empty or cannot be compared."""
