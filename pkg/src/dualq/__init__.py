"""Dual-granularity offline Q-learning with exact dynamic-programming oracles."""

from .data import Dataset, collect_dataset, load_dataset, make_behavior_policy, save_dataset
from .envs import (CategoricalEnvConfig, Classifier, TokenEnvConfig, make_categorical_env,
                   make_random_env, make_token_env)
from .exceptions import (ConfigError, DatasetFormatError, DomainError, DualQError,
                         FingerprintError, InvalidEnvError, InvalidPolicyError, NumericError,
                         StageError)
from .improve import ControlGenerator, DualGranularityAgent, ImprovementConfig, improve_policy
from .mdp import (EnvSpec, Policy, exact_action_values, exact_policy_evaluation,
                  induced_argmax_policy, value_iteration)
from .qlearn import CoarseQ, FineQ, FitConfig, QFunction, fit_coarse_q, fit_fine_q

__version__ = "0.1.0"

__all__ = [
    "CategoricalEnvConfig", "Classifier", "CoarseQ", "ConfigError", "ControlGenerator",
    "Dataset", "DatasetFormatError", "DomainError", "DualGranularityAgent", "DualQError",
    "EnvSpec", "FineQ", "FingerprintError", "FitConfig", "ImprovementConfig", "InvalidEnvError",
    "InvalidPolicyError", "NumericError", "Policy", "QFunction", "StageError", "TokenEnvConfig",
    "collect_dataset", "exact_action_values", "exact_policy_evaluation", "fit_coarse_q",
    "fit_fine_q", "improve_policy", "induced_argmax_policy", "load_dataset",
    "make_behavior_policy", "make_categorical_env", "make_random_env", "make_token_env",
    "save_dataset", "value_iteration",
]
