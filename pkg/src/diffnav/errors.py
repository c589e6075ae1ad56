"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes, so new error kinds
should subclass one of the categories below rather than raising bare
exceptions.
"""


class DiffnavError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffnavError):
    """Invalid configuration value or malformed config file."""


class ContractViolation(DiffnavError):
    """A documented precondition was violated by the caller."""


class InvalidGoalError(ContractViolation):
    """Goal placed on an occupied cell or outside the grid."""


class DegenerateEpisodeError(ContractViolation):
    """Episode whose start coincides with its goal (zero initial distance)."""


class SamplingExhaustedError(DiffnavError):
    """No valid sample found within the retry budget."""
