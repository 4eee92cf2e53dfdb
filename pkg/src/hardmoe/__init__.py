"""Hard-gated mixtures of experts for large multi-label tagging problems.

A trunk network is trained first; its last hidden features are reduced with
PCA and clustered with K-means, and one expert is trained per cluster. At
prediction time each input goes through the trunk (for routing) and exactly
one expert.
"""

from .data import (MultiLabelDataset, SyntheticSpec, TagDictionary, generate_single_label_task,
                   generate_synthetic, load_dataset, save_dataset)
from .errors import (ConfigError, DatasetValidationError, DependencyError, FormatError,
                     HardMoeError, SamplerError, ShapeError, TrainingError, UnsupportedModeError)
from .evaluation import EvalReport, Ensemble, evaluate, oracle_eval, transfer_probe
from .gater import Gater, build_gater
from .moe import (ExpertBundle, predict, train_base, train_ensemble, train_independent,
                  train_shared_decoder)
from .neuralcore import MlpModel, SgdConfig, init_mlp, train

__all__ = [
    "ConfigError",
    "DatasetValidationError",
    "DependencyError",
    "Ensemble",
    "EvalReport",
    "ExpertBundle",
    "FormatError",
    "Gater",
    "HardMoeError",
    "MlpModel",
    "MultiLabelDataset",
    "SamplerError",
    "SgdConfig",
    "ShapeError",
    "SyntheticSpec",
    "TagDictionary",
    "TrainingError",
    "UnsupportedModeError",
    "build_gater",
    "evaluate",
    "generate_single_label_task",
    "generate_synthetic",
    "init_mlp",
    "load_dataset",
    "oracle_eval",
    "predict",
    "save_dataset",
    "train",
    "train_base",
    "train_ensemble",
    "train_independent",
    "train_shared_decoder",
    "transfer_probe",
]

__version__ = "0.1.0"
