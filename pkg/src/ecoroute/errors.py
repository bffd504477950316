"""Exception hierarchy shared by all ecoroute modules."""


class EcoRouteError(Exception):
    """Base class for every error raised deliberately by the library."""


class ValidationError(EcoRouteError, ValueError):
    """Input data violates a documented contract."""


class ParseError(ValidationError):
    """A malformed row in an input file.

    The message always names the file and the 1-based line number.
    """

    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: {reason}")


class NotFoundError(EcoRouteError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class InsufficientDataError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class UndefinedMetricError(ValidationError):
    pass
