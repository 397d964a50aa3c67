"""Exception categories used across the package."""


class ConfigError(ValueError):
    """Invalid configuration value (bad schedule bounds, indivisible sizes, ...)."""


class ContractError(ValueError):
    """Caller violated an operation precondition (shape mismatch, index range, ...)."""


class DataError(ValueError):
    """Malformed dataset content (label ids out of range, missing classes, ...)."""


class FormatError(ValueError):
    """Corrupt or unsupported on-disk artifact (tensor files, manifests)."""
