"""Diffusion transformer segmentation on a deterministic synthetic phantom."""

__version__ = "0.1.0"

from dts.errors import ConfigError, ContractError, DataError, FormatError

__all__ = ["ConfigError", "ContractError", "DataError", "FormatError", "__version__"]
