"""Hierarchical sequential recommendation on a small numpy autodiff core.

Items are encoded once from their text by a small transformer, a second
transformer reads the user's item-embedding sequence, and a linear head scores
the whole catalog in one matrix product. A token-by-token generative baseline
with beam search is included for comparison.
"""

from .errors import (
    ChecksumError, ContractError, DataError, DimensionError, EmptyPoolError, FormatError, LiteRecError,
    TrainingError, VersionError,
)
from .evaluation import EvalReport, evaluate_full, topn_sampled_eval
from .item_encoder import EmbeddingCache, ItemEncoderConfig
from .model import LiteRec
from .rec_encoder import RecEncoderConfig
from .tensor import Tape, Tensor
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint, train_lite

__version__ = "0.1.0"

__all__ = [
    "ChecksumError", "ContractError", "DataError", "DimensionError", "EmptyPoolError", "EvalReport",
    "EmbeddingCache", "FormatError", "ItemEncoderConfig", "LiteRec", "LiteRecError", "RecEncoderConfig", "Tape",
    "Tensor", "TrainConfig", "Trainer", "TrainingError", "VersionError", "evaluate_full", "load_checkpoint",
    "save_checkpoint", "topn_sampled_eval", "train_lite",
]
