"""Shared foundation: domain types, config validation, storage, runtime."""

from .config import (
    LossWeights,
    ModelShape,
    RunConfig,
    Seeds,
    TrainingConfig,
    config_to_dict,
    load_config,
    validate_config,
)
from .runtime import worker_count
from .types import (
    DomainSpec,
    FlowState,
    MaterialPair,
    Movie4D,
    ScalarField3,
    denormalize_point,
    normalize_point,
    normalize_points,
)

__all__ = [
    "DomainSpec", "FlowState", "MaterialPair", "Movie4D", "ScalarField3",
    "normalize_point", "denormalize_point", "normalize_points",
    "RunConfig", "TrainingConfig", "LossWeights", "ModelShape", "Seeds",
    "validate_config", "load_config", "config_to_dict", "worker_count",
]
