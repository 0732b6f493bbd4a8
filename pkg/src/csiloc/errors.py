"""Exception hierarchy shared across the package."""


class CsilocError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(CsilocError, ValueError):
    pass


class DegenerateGeometryError(CsilocError, ValueError):
    """Two scene points coincide, so angles or derivatives are undefined."""


class SingularFimError(CsilocError, ArithmeticError):
    """The Fisher information is numerically singular (unidentifiable geometry)."""

    def __init__(self, message, condition_number=float("inf")):
        super().__init__(message)
        self.condition_number = condition_number


class SingularModelError(CsilocError, ValueError):
    """The observation model carries no information (e.g. all-zero pilots)."""


class ShapeMismatchError(CsilocError, ValueError):
    pass


class ConfigMismatchError(CsilocError, ValueError):
    """Loss and network head disagree, or a model does not fit its data."""


class UncalibratedInputError(CsilocError, ValueError):
    pass


class WindowLengthError(CsilocError, ValueError):
    pass


class EmptyInputError(CsilocError, ValueError):
    pass


class LengthMismatchError(CsilocError, ValueError):
    pass


class NoPathFoundError(CsilocError, RuntimeError):
    pass


class FileFormatError(CsilocError, IOError):
    """Base class for container-file problems."""


class VersionMismatchError(FileFormatError):
    pass


class ChecksumMismatchError(FileFormatError):
    pass
