"""Shared exception classes."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated by the caller."""


class ConfigurationError(ValueError):
    """A config value, task layout, or parameter shape is invalid."""


class ProtocolParseError(ValueError):
    """Observer response body is not valid JSON / UTF-8."""


class ProtocolSchemaError(ValueError):
    """Observer response parsed but does not match the documented schema."""


class FingerprintMismatch(ValueError):
    """Artifact was produced under a different architecture fingerprint."""
