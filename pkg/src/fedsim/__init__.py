"""Deterministic single-process federated learning simulator."""

from .algorithms import (
    RoundTrace,
    RunConfig,
    RunResult,
    run_centralized,
    run_fed_cyclic,
    run_fed_star,
    run_fedavg,
    run_local_only,
    run_ringfed,
    run_strategy,
)
from .data import ClientDataset, DomainShiftSpec, Federation, generate_federation, load_features, split_train_test
from .numerics import MlpConfig, MlpModel, SgdConfig, flatten, init_model, unflatten

__version__ = "0.1.0"

__all__ = [
    "ClientDataset", "DomainShiftSpec", "Federation", "MlpConfig", "MlpModel", "RoundTrace",
    "RunConfig", "RunResult", "SgdConfig", "flatten", "generate_federation", "init_model",
    "load_features", "run_centralized", "run_fed_cyclic", "run_fed_star", "run_fedavg",
    "run_local_only", "run_ringfed", "run_strategy", "split_train_test", "unflatten",
]
