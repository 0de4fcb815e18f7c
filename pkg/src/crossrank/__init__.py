"""Cross-modal gene/image representation learning with ranking consistency
and teacher/student self-distillation, in plain numpy."""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, CrossRankError, DegenerateEmbeddingError,
                     GenerationError, NumericError, ShapeError, UnsupportedVersionError,
                     ValidationError)
from .losses import LossConfig
from .encoders import AugmentConfig
from .preprocess import SpotDataset, preprocess, read_dataset, write_dataset
from .synthdata import SynthConfig, generate
from .trainer import TrainConfig, train, load_checkpoint, save_checkpoint
