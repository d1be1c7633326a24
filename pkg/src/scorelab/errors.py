"""Exception taxonomy shared across the package.

ConfigError maps to CLI exit code 2, NumericalFailure to exit code 3.
Plain ValueError is used for ordinary invalid arguments.
"""


class ConfigError(ValueError):
    """A run configuration violates a documented precondition."""


class ScheduleError(ConfigError):
    """A noise schedule cannot be constructed under the given constraints."""


class NumericalFailure(RuntimeError):
    """A numerical routine produced non-finite values or diverged."""


class MagnitudeError(NumericalFailure):
    """The magnitude weighting system stayed singular after regularization."""


class UndefinedCorrelation(ValueError):
    """Correlation requested on a zero-variance input."""
