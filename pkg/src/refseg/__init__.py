"""Semi-supervised segmentation with reference-based pseudo-labels."""

from .config import ConfigError, ExperimentConfig, load_config
from .consistency import AugmentationSpec, augment, consistency_target
from .estimators import RPGSegmenter
from .matching import PseudoLabelResult, ReferencePseudoLabeler, assign_labels, brute_force_oracle, entropy_weight
from .model import FilterBank, PixelModel
from .pool import PoolConfig, ReferencePool, sample_pool
from .synth import SceneSpec, generate_dataset
from .tensor_io import SeededRng, read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "AugmentationSpec",
    "ConfigError",
    "ExperimentConfig",
    "FilterBank",
    "PixelModel",
    "PoolConfig",
    "PseudoLabelResult",
    "RPGSegmenter",
    "ReferencePool",
    "ReferencePseudoLabeler",
    "SceneSpec",
    "SeededRng",
    "assign_labels",
    "augment",
    "brute_force_oracle",
    "consistency_target",
    "entropy_weight",
    "generate_dataset",
    "load_config",
    "read_tensor",
    "sample_pool",
    "write_tensor",
]
