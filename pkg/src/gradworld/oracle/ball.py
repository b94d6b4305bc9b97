"""Bouncing-ball environment: projectile flight with specular bounces off the
floor and a static wall. Used for the initial-velocity optimization study and
as a robot-free, action-free training domain for the learned dynamics.

World-vector convention for ball scenes: the shared 7-slot layout
(gravity, table_friction, restitution, x0, x1, y0, y1) is reused with
table_friction = 0 and the wall plane sitting at the y1 slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from ..representation import (
    Episode,
    PhysicalState,
    SceneDescriptors,
    make_object_attrs,
    make_world_vector,
)


@dataclass
class BallTaskConfig:
    start: tuple = (0.0, 0.0, 1.0)
    radius: float = 0.05
    mass: float = 0.2
    gravity: float = 9.81
    restitution: float = 0.8
    wall_y: float = 1.5
    dt: float = 0.02
    horizon: int = 60                      # transitions per episode
    # target frozen from the oracle landing point of v0 = (0, 3, 1); see tests
    target: tuple = (0.0, -0.23, 0.2788511999999999)
    v0_low: tuple = (-0.5, 1.5, -1.0)
    v0_high: tuple = (0.5, 4.5, 2.5)
    bounds_x: tuple = (-2.0, 2.0)
    bounds_y_min: float = -2.0

    def world_vector(self) -> np.ndarray:
        return make_world_vector(
            self.gravity, 0.0, self.restitution,
            (self.bounds_x[0], self.bounds_x[1], self.bounds_y_min, self.wall_y),
        )

    def descriptors(self) -> SceneDescriptors:
        attrs = make_object_attrs(
            (self.radius,) * 3, self.mass, 0.0, (0.9, 0.3, 0.2))[None, :]
        return SceneDescriptors(object_attrs=attrs, world=self.world_vector())


def ball_step(position: np.ndarray, velocity: np.ndarray, cfg: BallTaskConfig):
    """One semi-implicit Euler step with floor/wall bounces; returns (pos, vel)."""
    if np.any(~np.isfinite(position)) or np.any(~np.isfinite(velocity)):
        raise ValueError("non-finite ball state")
    v = velocity.copy()
    v[2] -= cfg.gravity * cfg.dt
    p = position + v * cfg.dt
    if p[2] < cfg.radius and v[2] < 0.0:
        v[2] = -cfg.restitution * v[2]
        p[2] = cfg.radius
    if p[1] > cfg.wall_y - cfg.radius and v[1] > 0.0:
        v[1] = -cfg.restitution * v[1]
        p[1] = cfg.wall_y - cfg.radius
    return p, v


def ball_rollout(v0, cfg: BallTaskConfig | None = None):
    """Trajectory from the configured start with initial velocity ``v0``.

    Returns (positions (T+1, 3), velocities (T+1, 3)).
    """
    cfg = cfg or BallTaskConfig()
    p = np.asarray(cfg.start, dtype=np.float64).copy()
    v = np.asarray(v0, dtype=np.float64).copy()
    positions, velocities = [p.copy()], [v.copy()]
    for _ in range(cfg.horizon):
        p, v = ball_step(p, v, cfg)
        positions.append(p.copy())
        velocities.append(v.copy())
    return np.stack(positions), np.stack(velocities)


def final_position_error(v0, cfg: BallTaskConfig) -> float:
    """Squared distance of the terminal position from the target."""
    positions, _ = ball_rollout(v0, cfg)
    d = positions[-1] - np.asarray(cfg.target)
    return float(d @ d)


def oracle_best_v0(cfg: BallTaskConfig | None = None, n_grid: int = 7, n_polish: int = 3):
    """Gradient-free reference optimum: grid seeding + Nelder-Mead polish.

    Returns (v0, loss). Independent of the learned model; used to validate
    the model-gradient optimization result. The problem can have several
    global optima (different bounce paths to the same point); any of them
    is an acceptable reference.
    """
    cfg = cfg or BallTaskConfig()
    lo, hi = np.asarray(cfg.v0_low), np.asarray(cfg.v0_high)
    grids = [np.linspace(lo[i], hi[i], n_grid) for i in range(3)]
    scored = []
    for vx in grids[0]:
        for vy in grids[1]:
            for vz in grids[2]:
                v = np.array([vx, vy, vz])
                scored.append((final_position_error(v, cfg), v))
    scored.sort(key=lambda t: t[0])
    best_f, best_x = scored[0]
    for f0, x0 in scored[:n_polish]:
        res = optimize.minimize(lambda v: final_position_error(v, cfg), x0,
                                method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000})
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
    return best_x, best_f


def generate_ball_episode(seed: int, cfg: BallTaskConfig | None = None) -> Episode:
    """Passive episode (no robot, no actions) from a random initial velocity."""
    cfg = cfg or BallTaskConfig()
    rng = np.random.default_rng(seed)
    v0 = rng.uniform(cfg.v0_low, cfg.v0_high)
    positions, velocities = ball_rollout(v0, cfg)
    states = [
        PhysicalState(
            robot_position=None, robot_velocity=None, robot_rotation=None,
            object_positions=positions[t][None, :],
            object_velocities=velocities[t][None, :],
            object_quaternions=np.array([[1.0, 0.0, 0.0, 0.0]]),
        )
        for t in range(positions.shape[0])
    ]
    ep = Episode(
        descriptors=cfg.descriptors(),
        states=states,
        actions=np.zeros((len(states), 0)),
        meta={"task": "ball", "seed": int(seed), "dt": cfg.dt},
    )
    ep.validate()
    return ep
