"""Variational model-based adversarial imitation from pixels."""

from .core import ConfigError, NonFiniteError, ReplayBuffer, RunConfig, RunReport, Trajectory, derive_seed
from .envs import expert_return, generate_demos, make_env
from .trainer import bc_train, evaluate_policy, load_source_run, vmail_train, vmail_train_tasks, vmail_transfer

__all__ = [
    "ConfigError", "NonFiniteError", "ReplayBuffer", "RunConfig", "RunReport", "Trajectory", "derive_seed",
    "expert_return", "generate_demos", "make_env",
    "bc_train", "evaluate_policy", "load_source_run", "vmail_train", "vmail_train_tasks", "vmail_transfer",
]
