"""Federated-learning backdoor defense by shadow learning, with robust filtering."""

from .robust import FilterParams, filter_clients, get_threshold, que_score, robust_est
from .shadow import ShadowEnsemble, ShadowState, shadow_round, update_shadow_state
from .simulator import ExperimentConfig, Simulation, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "FilterParams",
    "ShadowEnsemble",
    "ShadowState",
    "Simulation",
    "filter_clients",
    "get_threshold",
    "que_score",
    "robust_est",
    "run_experiment",
    "shadow_round",
    "update_shadow_state",
]
