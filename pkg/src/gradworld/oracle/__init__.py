"""Analytic ground-truth simulators (push table, bouncing ball)."""

from .world import (
    OracleObject,
    OracleRobot,
    OracleWorld,
    combined_friction,
    default_robot,
    rot_z,
    step,
)
from .episodes import (
    PHASES,
    PHASE_RATIO,
    PushTaskConfig,
    generate_episode,
    load_dataset,
    load_episode,
    phase_counts,
    sample_scene,
    save_dataset,
    save_episode,
    to_physical_state,
)
from .ball import (
    BallTaskConfig,
    ball_rollout,
    ball_step,
    final_position_error,
    generate_ball_episode,
    oracle_best_v0,
)

__all__ = [
    "BallTaskConfig",
    "OracleObject",
    "OracleRobot",
    "OracleWorld",
    "PHASES",
    "PHASE_RATIO",
    "PushTaskConfig",
    "ball_rollout",
    "ball_step",
    "combined_friction",
    "default_robot",
    "final_position_error",
    "generate_ball_episode",
    "generate_episode",
    "load_dataset",
    "load_episode",
    "oracle_best_v0",
    "phase_counts",
    "rot_z",
    "sample_scene",
    "save_dataset",
    "save_episode",
    "step",
    "to_physical_state",
]
