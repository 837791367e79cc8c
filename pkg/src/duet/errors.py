"""Exception types shared across the package."""


class DuetError(Exception):
    """Base class for package errors."""


class ConfigError(DuetError):
    """Invalid or inconsistent configuration (shapes, sizes, toggles)."""


class InputError(DuetError):
    """Caller-supplied data is unusable (empty text, NaN image, bad width)."""


class ManifestError(DuetError):
    """Dataset manifest failed to load or validate."""


class ProtocolError(DuetError):
    """Evaluation protocol is missing required metadata."""
