"""Exception hierarchy shared by every module.

The CLI maps each family onto an exit code, so raise the most specific class.
"""


class DecoyLinkError(Exception):
    """Base class for all package errors."""


class ConfigError(DecoyLinkError):
    """Invalid run configuration or parameter value (exit code 2)."""


class ParameterError(ConfigError, ValueError):
    """A function argument is outside its documented domain."""


class SpecError(ConfigError):
    """A simulation spec is invalid or infeasible."""


class InputError(DecoyLinkError):
    """Unreadable or malformed input data (exit code 3)."""


class SchemaError(InputError):
    """Data does not conform to the declared schema."""


class NumericalError(DecoyLinkError):
    """An internal numerical procedure failed (exit code 4)."""
