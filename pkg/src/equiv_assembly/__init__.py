"""Rotation-equivariant assembly of fractured point clouds."""

from .config import TrainConfig, load_config
from .correlation import AssemblyNet, ModelConfig, aggregate, part_correlation, rotation_from_6d
from .data import AssemblySample, DataConfig, generate_dataset, generate_sample, read_dataset, write_dataset
from .equivariance import check_equivariance
from .errors import (
    AssemblyError,
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetParseError,
    DimensionError,
    GenerationError,
    TrainingError,
)
from .geometry import Pose, chamfer, geodesic, knn_indices, random_rotation_uniform
from .losses import LossWeights, MetricReport, pose_metrics, total_loss
from .vn import VNEncoder

__version__ = "0.1.0"
