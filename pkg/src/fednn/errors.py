"""Exception types shared across the package."""


class FednnError(Exception):
    """Base class for all package-specific errors."""


class FormatError(FednnError, ValueError):
    """Malformed binary payload or file."""


class BadMagicError(FormatError):
    """Stream does not start with the expected magic bytes."""


class TruncatedStreamError(FormatError):
    """Stream ended before the declared content was read."""


class VersionMismatchError(FormatError):
    """Stream was written with an unsupported format version."""


class AuthenticationError(FednnError):
    """A sealed record failed its integrity/authenticity check."""


class ProtocolError(FednnError):
    """A federated round violated its contract."""


class ConfigError(FednnError):
    """Invalid experiment configuration; carries the offending keys."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = tuple(keys)


class InsufficientSamplesError(FednnError, ValueError):
    """Too few training vectors for the requested quantizer shape."""
