"""Exception hierarchy shared by every stage."""


class CascadeError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(CascadeError, ValueError):
    pass


class DegenerateInputError(InvalidInputError):
    pass


class NumericalFailureError(CascadeError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(CascadeError):
    pass


class InvalidRoleError(CascadeError):
    pass


class FormatError(CascadeError):
    """Problems reading one of the on-disk formats."""


class MagicMismatchError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class ManifestError(FormatError):
    pass
