"""Federated offline RL with a server-side Q-ensemble and device-side actor rectification."""

from .approximator import ApproximatorParams, LayerSpec, NonFiniteError, forward, init_params, mlp_header
from .config import ExperimentConfig, FederationOptions, DatasetSpec, load_config, pollution_config
from .envs import OfflineDataset, TabularMDP, evaluate_policy, generate_dataset, make_env
from .federation import ParamEnvelope, build_datasets, run_federation
from .losses import CriticPair, LocalLossConfig
from .rectifier import RectifierConfig, full_search, periodic_rectify
from .verify import BoundReport, TabularPolicy, check_theorem1, exact_policy_value, visitation_distribution

__version__ = "0.1.0"

__all__ = [
    "ApproximatorParams", "LayerSpec", "NonFiniteError", "forward", "init_params", "mlp_header",
    "ExperimentConfig", "FederationOptions", "DatasetSpec", "load_config", "pollution_config",
    "OfflineDataset", "TabularMDP", "evaluate_policy", "generate_dataset", "make_env",
    "ParamEnvelope", "build_datasets", "run_federation", "CriticPair", "LocalLossConfig",
    "RectifierConfig", "full_search", "periodic_rectify",
    "BoundReport", "TabularPolicy", "check_theorem1", "exact_policy_value", "visitation_distribution",
]
