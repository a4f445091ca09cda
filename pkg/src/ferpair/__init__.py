"""Emotion-recognition heads on frozen face embeddings.

Angular-margin and auxiliary losses with analytic gradients, imbalance-aware
samplers, pairwise discernment heads and the reporting pipeline, all in
NumPy.
"""

__version__ = "0.1.0"

from .datamodel import (
    CLASS_NAMES,
    Dataset,
    FeatureRecord,
    PairKey,
    SynthesisConfig,
    all_pairs,
    class_distribution,
    load_feature_file,
    pair_view,
    profile_config,
    split,
    synthesize_dataset,
    write_feature_file,
)
from .estimators import MultiHeadClassifier, PairwiseDictionaryClassifier
from .exceptions import ConfigError, DataError, FeatureFileError, FerpairError, NumericError
from .losses import AamParams, SignedMseParams, aam_loss, combined_loss, pearson_loss, signed_mse, softmax_ce
from .sampling import InverseFrequency, Natural, PairBalanced, SamplerSpec, draw_epoch
from .training import TrainConfig, train_general, train_pairwise

__all__ = [
    "CLASS_NAMES",
    "AamParams",
    "ConfigError",
    "DataError",
    "Dataset",
    "FeatureFileError",
    "FeatureRecord",
    "FerpairError",
    "InverseFrequency",
    "MultiHeadClassifier",
    "Natural",
    "NumericError",
    "PairBalanced",
    "PairKey",
    "PairwiseDictionaryClassifier",
    "SamplerSpec",
    "SignedMseParams",
    "SynthesisConfig",
    "TrainConfig",
    "aam_loss",
    "all_pairs",
    "class_distribution",
    "combined_loss",
    "draw_epoch",
    "load_feature_file",
    "pair_view",
    "pearson_loss",
    "profile_config",
    "signed_mse",
    "softmax_ce",
    "split",
    "synthesize_dataset",
    "train_general",
    "train_pairwise",
    "write_feature_file",
]
