"""Exception taxonomy shared across the package.

The service layer maps these onto HTTP status codes, so new error kinds
should subclass one of the classes below rather than raising bare
ValueError/RuntimeError.
"""


class MaskFieldError(Exception):
    """Base class for all package errors."""


class InputError(MaskFieldError, ValueError):
    """Caller passed malformed arguments (bad shapes, out-of-range values)."""


class ConfigurationError(MaskFieldError, ValueError):
    """Model/config structures are inconsistent with each other."""


class DataError(MaskFieldError, ValueError):
    """Dataset contents violate the format contract."""


class NumericError(MaskFieldError, ArithmeticError):
    """Non-finite values appeared where finite math was required."""


class RequestError(MaskFieldError, ValueError):
    """A service request is invalid (unknown label, bad mix spec, ...)."""


class HandleExpiredError(RequestError):
    """A style handle is unknown or past its TTL."""
