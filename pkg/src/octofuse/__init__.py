"""Multi-modal segmentation with per-modality encoders and a shared fusion decoder,
built on a small numpy reverse-mode autodiff engine."""

from .data import MultiModalVolume, generate_synthetic, read_volume, write_volume
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    NonFiniteError,
    OctofuseError,
    TrainingError,
)
from .fusion import FusionStrategy, ModelSpec, forward, init_model
from .harness import ExperimentConfig, compare_fusion, render_report, run_experiment
from .nn_blocks import EncoderSpec
from .tensor import Tensor
from .training import TrainConfig, train_model

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DimensionError",
    "EncoderSpec",
    "ExperimentConfig",
    "FormatError",
    "FusionStrategy",
    "ModelSpec",
    "MultiModalVolume",
    "NonFiniteError",
    "OctofuseError",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "compare_fusion",
    "forward",
    "generate_synthetic",
    "init_model",
    "read_volume",
    "render_report",
    "run_experiment",
    "train_model",
    "write_volume",
]
