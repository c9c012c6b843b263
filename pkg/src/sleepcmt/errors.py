"""Exception hierarchy shared across the package.

The CLI maps :class:`CmtError` subclasses to exit code 1 (user/config
problems) and :class:`InvariantError` to exit code 2.
"""


class CmtError(Exception):
    """Base class for all user-facing errors."""


class ConfigError(CmtError, ValueError):
    pass


class DimensionError(CmtError, ValueError):
    pass


class InputError(CmtError, ValueError):
    pass


class IntegrityError(CmtError, ValueError):
    pass


class LabelParseError(CmtError, ValueError):
    pass


class UsageError(CmtError, RuntimeError):
    pass


class InvariantError(RuntimeError):
    """An internal consistency check failed; indicates a bug, not bad input."""
