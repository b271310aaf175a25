"""Exception types shared across the toolkit.

Every error a caller is expected to handle has its own class; plain
ValueError/TypeError are reserved for programming mistakes.
"""


class WifitraceError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(WifitraceError):
    """Invalid or incomplete configuration (missing capacity, bad prime, ...)."""


class RejectedEventError(WifitraceError):
    """Event arrived before the stream origin or for an already-sealed epoch."""


class EncodingError(WifitraceError):
    """Value cannot be encoded (symbol outside alphabet, oversized field, ...)."""


class ThresholdError(WifitraceError):
    """Secret-sharing threshold violated (degree >= share count, too few shares)."""


class ShapeError(WifitraceError):
    """Mismatched fragment shapes, alphabets, or program parameter shapes."""


class CrossServerError(WifitraceError):
    """Attempted arithmetic between shares held by different servers."""


class InterpolationError(WifitraceError):
    """Interpolation over an invalid point set (duplicate x coordinates)."""


class KeyDerivationError(WifitraceError):
    """Key material of mismatched length or otherwise unusable."""


class SealedEpochError(WifitraceError):
    """Write attempted against an epoch that has already been sealed."""


class UnauthorizedQueryError(WifitraceError):
    """Publisher refused (or could not perform) device verification."""


class RegistryError(WifitraceError):
    """Lookup against a frozen code registry for an unregistered value."""


class CapabilityError(WifitraceError):
    """Server asked to perform an operation it holds no key/capability for."""


class QueryError(WifitraceError):
    """Malformed query (non-searchable column, bad parameter value)."""
