"""Text style transfer with an attention-aware normalizing flow over token embeddings."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError,
                     NumericError, SFlowError, VocabularyError)

__all__ = [
    "__version__", "SFlowError", "ContractError", "DimensionError", "NumericError",
    "VocabularyError", "DataError", "ConfigError", "CheckpointError",
]
