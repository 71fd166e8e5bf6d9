"""Unsupervised cross-camera re-identification by fusing appearance with
learned spatio-temporal transition patterns."""

from .core import (
    SOURCE_LABELED,
    TARGET_EVAL,
    TARGET_UNLABELED,
    ConfigError,
    Dataset,
    DomainError,
    InputError,
    InvariantError,
    LabelAccessError,
    Observation,
    StFusionError,
    pair_interval,
    read_observations,
    write_observations,
)
from .embedder import (
    TrainConfig,
    VisualModel,
    classify,
    init_model,
    read_model,
    train_supervised,
    visual_score,
    write_model,
)
from .evaluation import CmcCurve, cmc, error_rates, fusion_cmc, theorem1_harness, visual_cmc
from .fusion import FusionParams, classify_fused, fuse_rank, fusion_score
from .rankopt import LoopConfig, Triplet, mutual_promote, rank_loss, sample_triplets, train_on_triplets
from .simulator import SimConfig, ground_truth_pattern, simulate
from .stpattern import (
    BinSpec,
    StHistogram,
    correct_pattern,
    count_patterns,
    lookup,
    read_histogram,
    write_histogram,
)

__version__ = "0.1.0"

__all__ = [
    "BinSpec",
    "CmcCurve",
    "ConfigError",
    "Dataset",
    "DomainError",
    "FusionParams",
    "InputError",
    "InvariantError",
    "LabelAccessError",
    "LoopConfig",
    "Observation",
    "SOURCE_LABELED",
    "SimConfig",
    "StFusionError",
    "StHistogram",
    "TARGET_EVAL",
    "TARGET_UNLABELED",
    "TrainConfig",
    "Triplet",
    "VisualModel",
    "classify",
    "classify_fused",
    "cmc",
    "correct_pattern",
    "count_patterns",
    "error_rates",
    "fuse_rank",
    "fusion_cmc",
    "fusion_score",
    "ground_truth_pattern",
    "init_model",
    "lookup",
    "mutual_promote",
    "pair_interval",
    "rank_loss",
    "read_histogram",
    "read_model",
    "read_observations",
    "sample_triplets",
    "simulate",
    "theorem1_harness",
    "train_on_triplets",
    "train_supervised",
    "visual_cmc",
    "visual_score",
    "write_histogram",
    "write_model",
    "write_observations",
]
