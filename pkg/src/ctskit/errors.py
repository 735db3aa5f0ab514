class CtsKitError(Exception):
    """Base class for all package errors."""


class ParameterError(CtsKitError, ValueError):
    """An argument or configuration value is outside its valid range."""


class SingularityError(CtsKitError, ValueError):
    """A query hit a point where the quantity is undefined (e.g. sigma_0 = 0)."""


class NumericalError(CtsKitError, ArithmeticError):
    """A computation produced non-finite values."""


class ParseError(CtsKitError, ValueError):
    def __init__(self, message, path=""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NameCollisionError(ParseError):
    pass


class UnsupportedConfigurationError(CtsKitError):
    pass


class RefinerError(CtsKitError):
    pass


class RefinerUnavailable(RefinerError):
    pass


class RefinerBadOutput(RefinerError):
    pass
