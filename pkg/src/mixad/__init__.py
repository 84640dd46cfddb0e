"""Hierarchical mixture-of-experts anomaly detection over frozen encoder features."""

from .bundles import (
    BadMagicError,
    BundleError,
    DatasetManifest,
    DimMismatchError,
    FeatureBundle,
    TruncatedError,
    fuse_target,
    read_bundle,
    write_bundle,
)
from .scoring import AggregationConfig, aggregate, auroc, evaluate
from .synthetic import SyntheticSpec, gen_synthetic
from .training import Engine, TrainConfig, Trainer, load_checkpoint, save_checkpoint

__all__ = [
    "AggregationConfig",
    "BadMagicError",
    "BundleError",
    "DatasetManifest",
    "DimMismatchError",
    "Engine",
    "FeatureBundle",
    "SyntheticSpec",
    "TrainConfig",
    "Trainer",
    "TruncatedError",
    "aggregate",
    "auroc",
    "evaluate",
    "fuse_target",
    "gen_synthetic",
    "load_checkpoint",
    "read_bundle",
    "save_checkpoint",
    "write_bundle",
]
