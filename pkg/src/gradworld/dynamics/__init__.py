"""Learned object-centric recurrent dynamics: model, training, rollout."""

from .model import (
    DynamicsCore,
    ModelConfig,
    adaln,
    init_params,
    orthonormalize_rotation,
)
from .training import (
    RolloutTrace,
    TrainConfig,
    ar_ratio_schedule,
    compute_losses,
    episode_arrays,
    history_to_csv,
    load_dynamics,
    rollout_states,
    rollout_window,
    save_dynamics,
    train,
)

__all__ = [
    "DynamicsCore",
    "ModelConfig",
    "RolloutTrace",
    "TrainConfig",
    "adaln",
    "ar_ratio_schedule",
    "compute_losses",
    "episode_arrays",
    "history_to_csv",
    "init_params",
    "load_dynamics",
    "orthonormalize_rotation",
    "rollout_states",
    "rollout_window",
    "save_dynamics",
    "train",
]
