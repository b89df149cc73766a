"""Explanation-regularised training (eX2L) with ERM and GroupDRO baselines on numpy."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import ConfigError, DataError, Ex2lError, FormatError, UsageError
from .similarity import KINDS, SimilarityFn, evaluate
from .trainer import TrainConfig, train, train_erm, train_ex2l, train_groupdro

__all__ = [
    "ConfigError", "DataError", "Ex2lError", "FormatError", "UsageError",
    "KINDS", "SimilarityFn", "evaluate",
    "TrainConfig", "train", "train_erm", "train_ex2l", "train_groupdro",
    "__version__",
]
