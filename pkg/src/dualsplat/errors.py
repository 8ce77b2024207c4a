"""Exception types raised across the package."""


class SplatError(Exception):
    """Base class for every error raised by dualsplat."""


class ContractViolation(SplatError, ValueError):
    """Inputs break a documented precondition (shape mismatch, bad range)."""


class DegenerateRotationError(ContractViolation):
    """Quaternion norm is too small to define a rotation."""


class ScheduleError(SplatError):
    """A training schedule leaves no active views to sample from."""


class ParseError(SplatError, ValueError):
    """A file could not be decoded."""


class HeaderError(ParseError):
    """Malformed or unsupported PLY header."""


class TruncatedPayloadError(ParseError):
    """PLY payload size disagrees with the declared vertex count."""


class VersionError(ParseError):
    """File declares a format or schema version this code does not know."""


class IntegrityError(SplatError):
    """Dataset manifest and frame files disagree."""


class ConfigError(SplatError, ValueError):
    """Invalid or unknown configuration key or value."""


class NonFiniteError(SplatError, FloatingPointError):
    """Training produced a NaN or infinite parameter."""
