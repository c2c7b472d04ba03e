"""Exception hierarchy shared across the package."""


class ImperviaError(Exception):
    """Base class for all package-specific errors."""


class FormatError(ImperviaError):
    """A binary file does not carry the expected magic/version."""


class SchemaError(ImperviaError):
    """A file header is structurally valid but semantically inconsistent."""


class ShapeMismatchError(ImperviaError):
    """Two grids or arrays that must be aligned have different shapes."""


class KindMismatchError(ImperviaError):
    """A grid of the wrong kind (continuous vs categorical) was supplied."""


class ConfigError(ImperviaError):
    """Invalid configuration key or value."""


class DivergenceError(ImperviaError):
    """Training produced a non-finite loss or gradient."""
