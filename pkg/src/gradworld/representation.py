"""Unified world representation: per-step physical states, static scene
descriptors, episodes, entity tokenization, normalization, and the composite
state loss shared by training and evaluation.

State layout (fixed across the project):
  robot features (15):  position(3), velocity(3), rotation matrix row-major(9)
  object features (10): position(3), velocity(3), unit quaternion wxyz(4)
  object attributes (8): half_size(3), mass(1), friction(1), color rgb(3)
  world vector (7): gravity, table_friction, restitution, bounds(x0,x1,y0,y1)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad

ROBOT_FEAT_DIM = 15
OBJECT_FEAT_DIM = 10
OBJECT_ATTR_DIM = 8
WORLD_DIM = 7

GEODESIC_CLAMP = 1.0 - 1e-7  # keeps arccos gradient finite at 0 and pi
# arccos at the clamp edge; subtracted so identical rotations score exactly 0
GEODESIC_OFFSET = float(np.arccos(GEODESIC_CLAMP))


@dataclass
class PhysicalState:
    """Robot + per-object state at one timestep. ``robot_*`` may be None for
    robot-free scenes (passive dynamics)."""

    robot_position: Optional[np.ndarray]   # (3,)
    robot_velocity: Optional[np.ndarray]   # (3,)
    robot_rotation: Optional[np.ndarray]   # (9,) row-major, orthonormal
    object_positions: np.ndarray           # (N, 3)
    object_velocities: np.ndarray          # (N, 3)
    object_quaternions: np.ndarray         # (N, 4) unit, wxyz

    @property
    def has_robot(self) -> bool:
        return self.robot_position is not None

    @property
    def n_objects(self) -> int:
        return self.object_positions.shape[0]

    def robot_features(self) -> Optional[np.ndarray]:
        if not self.has_robot:
            return None
        return np.concatenate([self.robot_position, self.robot_velocity, self.robot_rotation])

    def object_features(self) -> np.ndarray:
        return np.concatenate(
            [self.object_positions, self.object_velocities, self.object_quaternions], axis=-1
        )

    @staticmethod
    def from_features(robot_feat: Optional[np.ndarray], obj_feat: np.ndarray) -> "PhysicalState":
        robot_pos = robot_vel = robot_rot = None
        if robot_feat is not None:
            robot_pos, robot_vel, robot_rot = robot_feat[:3], robot_feat[3:6], robot_feat[6:15]
        return PhysicalState(
            robot_position=robot_pos,
            robot_velocity=robot_vel,
            robot_rotation=robot_rot,
            object_positions=obj_feat[:, :3],
            object_velocities=obj_feat[:, 3:6],
            object_quaternions=obj_feat[:, 6:10],
        )

    def validate(self, quat_tol: float = 1e-6) -> None:
        if self.has_robot:
            R = self.robot_rotation.reshape(3, 3)
            if not np.allclose(R @ R.T, np.eye(3), atol=quat_tol):
                raise ValueError("robot rotation block is not orthonormal")
        norms = np.linalg.norm(self.object_quaternions, axis=-1)
        if not np.allclose(norms, 1.0, atol=quat_tol):
            raise ValueError(f"object quaternions not unit norm: {norms}")

    def copy(self) -> "PhysicalState":
        c = lambda a: None if a is None else a.copy()
        return PhysicalState(
            c(self.robot_position), c(self.robot_velocity), c(self.robot_rotation),
            self.object_positions.copy(), self.object_velocities.copy(),
            self.object_quaternions.copy(),
        )


@dataclass
class SceneDescriptors:
    """Time-invariant scene configuration: per-object attributes + world vector."""

    object_attrs: np.ndarray  # (N, 8)
    world: np.ndarray         # (7,)

    @property
    def n_objects(self) -> int:
        return self.object_attrs.shape[0]

    def validate(self) -> None:
        half, mass, friction = self.object_attrs[:, :3], self.object_attrs[:, 3], self.object_attrs[:, 4]
        if np.any(half <= 0):
            raise ValueError("half_size must be strictly positive")
        if np.any(mass <= 0):
            raise ValueError("mass must be strictly positive")
        if np.any(friction < 0):
            raise ValueError("friction must be non-negative")

    def copy(self) -> "SceneDescriptors":
        return SceneDescriptors(self.object_attrs.copy(), self.world.copy())


def make_object_attrs(half_size, mass, friction, color) -> np.ndarray:
    return np.concatenate([np.asarray(half_size, dtype=np.float64),
                           [float(mass), float(friction)],
                           np.asarray(color, dtype=np.float64)])


def make_world_vector(gravity, table_friction, restitution, bounds) -> np.ndarray:
    return np.array([gravity, table_friction, restitution, *bounds], dtype=np.float64)


@dataclass
class Episode:
    """One trajectory: descriptors, aligned state/action sequences, optional frames.

    ``actions[t]`` is the command applied at ``states[t]``; the final entry is
    a zero placeholder so states and actions stay index-aligned.
    """

    descriptors: SceneDescriptors
    states: list                      # list[PhysicalState], length >= 2
    actions: np.ndarray               # (len(states), action_dim)
    frames: Optional[list] = None     # list[ndarray HxWx3] if rendered
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def n_objects(self) -> int:
        return self.descriptors.n_objects

    def validate(self) -> None:
        if len(self.states) < 2:
            raise ValueError("episode needs at least 2 steps")
        n = self.n_objects
        if any(s.n_objects != n for s in self.states):
            raise ValueError("object count varies across steps")
        if self.actions.shape[0] != len(self.states):
            raise ValueError("actions misaligned with states")
        if not np.all(np.isfinite(self.actions)):
            raise ValueError("non-finite action")

    def robot_feature_array(self) -> Optional[np.ndarray]:
        """(S, 15) or None."""
        if not self.states[0].has_robot:
            return None
        return np.stack([s.robot_features() for s in self.states])

    def object_feature_array(self) -> np.ndarray:
        """(S, N, 10)."""
        return np.stack([s.object_features() for s in self.states])


# ---------------------------------------------------------------------------
# tokenization


def tokenize(state: PhysicalState, descriptors: SceneDescriptors, action: np.ndarray):
    """Entity token sequence plus per-entity condition vectors.

    Token 0 is the robot (when present); tokens 1..N are objects. The robot's
    condition carries the action and world configuration; each object's
    condition carries its own attributes and the world configuration.
    """
    tokens = []
    conditions = []
    world = descriptors.world
    if state.has_robot:
        tokens.append(state.robot_features())
        conditions.append(np.concatenate([np.asarray(action, dtype=np.float64), world]))
    obj_feat = state.object_features()
    for i in range(state.n_objects):
        tokens.append(obj_feat[i])
        conditions.append(np.concatenate([descriptors.object_attrs[i], world]))
    return tokens, conditions


# ---------------------------------------------------------------------------
# composite state loss


def _abs_t(x):
    return ad.add(ad.relu(x), ad.relu(ad.neg(x)))


def rotation_geodesic(rot_pred, rot_target):
    """Geodesic SO(3) distance from flattened rotation blocks (..., 9).

    arccos((tr(Rp Rg^T) - 1) / 2); the trace equals the elementwise dot of
    the two flattened matrices. The arccos argument is clamped away from
    +-1 to keep the gradient finite, and the arccos value at the clamp edge
    is subtracted so the self-distance is exactly zero. Result shape (...,).
    """
    dot = ad.sum_(ad.mul(rot_pred, rot_target), axes=-1)
    arg = ad.mul(ad.sub(dot, 1.0), 0.5)
    return ad.sub(ad.acos(ad.clamp(arg, -GEODESIC_CLAMP, GEODESIC_CLAMP)), GEODESIC_OFFSET)


def quaternion_distance(q_pred, q_target):
    """Sign-invariant unit-quaternion distance 1 - |<qp, qg>| over (..., 4)."""
    qp = ad.quat_normalize(q_pred)
    qg = ad.quat_normalize(q_target)
    dot = ad.sum_(ad.mul(qp, qg), axes=-1)
    return ad.sub(1.0, _abs_t(dot))


def state_loss_features(robot_pred, robot_target, obj_pred, obj_target, beta: float = 1.0):
    """Composite state loss on feature arrays (robot (..., 15), objects (..., N, 10)).

    Robot: Smooth-L1 on position/velocity plus rotation geodesic. Objects:
    Smooth-L1 on position/velocity plus quaternion distance, averaged over
    objects. Everything is then averaged over any leading batch axes.
    Returns a scalar Tensor; differentiable end to end.
    """
    terms = []
    if robot_pred is not None:
        rp, rt = ad.as_tensor(robot_pred), ad.as_tensor(robot_target)
        pos = ad.mean(ad.smooth_l1(ad.slice_(rp, (..., slice(0, 3))), ad.slice_(rt, (..., slice(0, 3))), beta))
        vel = ad.mean(ad.smooth_l1(ad.slice_(rp, (..., slice(3, 6))), ad.slice_(rt, (..., slice(3, 6))), beta))
        rot = ad.mean(rotation_geodesic(ad.slice_(rp, (..., slice(6, 15))), ad.slice_(rt, (..., slice(6, 15)))))
        terms += [pos, vel, rot]
    op, ot = ad.as_tensor(obj_pred), ad.as_tensor(obj_target)
    pos = ad.mean(ad.smooth_l1(ad.slice_(op, (..., slice(0, 3))), ad.slice_(ot, (..., slice(0, 3))), beta))
    vel = ad.mean(ad.smooth_l1(ad.slice_(op, (..., slice(3, 6))), ad.slice_(ot, (..., slice(3, 6))), beta))
    quat = ad.mean(quaternion_distance(ad.slice_(op, (..., slice(6, 10))), ad.slice_(ot, (..., slice(6, 10)))))
    terms += [pos, vel, quat]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def state_loss(predicted: PhysicalState, target: PhysicalState, beta: float = 1.0,
               stats: Optional["NormStats"] = None):
    """Composite loss between two states; see :func:`state_loss_features`.

    When ``stats`` is given, position/velocity blocks are normalized first so
    the Smooth-L1 transition point sits in normalized units.
    """
    if predicted.n_objects != target.n_objects:
        raise ValueError(
            f"object count mismatch: {predicted.n_objects} vs {target.n_objects}")
    if predicted.has_robot != target.has_robot:
        raise ValueError("one state has a robot, the other does not")
    rp, rt = predicted.robot_features(), target.robot_features()
    op, ot = predicted.object_features(), target.object_features()
    if stats is not None:
        if rp is not None:
            rp, rt = stats.norm_robot(rp), stats.norm_robot(rt)
        op, ot = stats.norm_object(op), stats.norm_object(ot)
    return state_loss_features(rp, rt, op, ot, beta=beta)


# ---------------------------------------------------------------------------
# normalization


def _mean_std(rows: np.ndarray, floor: float = 1e-6):
    mean = rows.mean(axis=0)
    std = np.maximum(rows.std(axis=0), floor)
    return mean, std


@dataclass
class NormStats:
    """Per-dimension mean/std over the training split.

    Quaternion and rotation blocks keep their unit-norm structure and are
    never statistically normalized.
    """

    robot_pos: tuple
    robot_vel: tuple
    obj_pos: tuple
    obj_vel: tuple
    action: tuple
    obj_attr: tuple
    world: tuple

    @staticmethod
    def from_episodes(episodes: list) -> "NormStats":
        robot_rows, obj_rows, action_rows, attr_rows, world_rows = [], [], [], [], []
        for ep in episodes:
            rf = ep.robot_feature_array()
            if rf is not None:
                robot_rows.append(rf[:, :6])
            obj_rows.append(ep.object_feature_array()[:, :, :6].reshape(-1, 6))
            action_rows.append(ep.actions)
            attr_rows.append(ep.descriptors.object_attrs)
            world_rows.append(ep.descriptors.world[None, :])
        if not obj_rows:
            raise ValueError("no episodes given")
        obj = np.concatenate(obj_rows)
        actions = np.concatenate(action_rows)
        attrs = np.concatenate(attr_rows)
        world = np.concatenate(world_rows)
        if robot_rows:
            robot = np.concatenate(robot_rows)
            robot_pos, robot_vel = _mean_std(robot[:, :3]), _mean_std(robot[:, 3:6])
        else:
            robot_pos = robot_vel = (np.zeros(3), np.ones(3))
        return NormStats(
            robot_pos=robot_pos,
            robot_vel=robot_vel,
            obj_pos=_mean_std(obj[:, :3]),
            obj_vel=_mean_std(obj[:, 3:6]),
            action=_mean_std(actions),
            obj_attr=_mean_std(attrs),
            world=_mean_std(world),
        )

    # The helpers below run on Tensors or plain arrays: autodiff ops pass
    # constants through untracked, so the same code serves training graphs
    # and bulk preprocessing.

    def _norm_block(self, x, stats_pairs):
        """Normalize leading blocks of the last axis, pass the tail through."""
        parts = []
        offset = 0
        for (mean, std) in stats_pairs:
            d = mean.shape[0]
            blk = ad.slice_(x, (..., slice(offset, offset + d)))
            parts.append(ad.div(ad.sub(blk, mean), std))
            offset += d
        xt = ad.as_tensor(x)
        if xt.shape[-1] > offset:
            parts.append(ad.slice_(xt, (..., slice(offset, None))))
        return ad.concat(parts, axis=-1)

    def _denorm_block(self, x, stats_pairs):
        parts = []
        offset = 0
        for (mean, std) in stats_pairs:
            d = mean.shape[0]
            blk = ad.slice_(x, (..., slice(offset, offset + d)))
            parts.append(ad.add(ad.mul(blk, std), mean))
            offset += d
        xt = ad.as_tensor(x)
        if xt.shape[-1] > offset:
            parts.append(ad.slice_(xt, (..., slice(offset, None))))
        return ad.concat(parts, axis=-1)

    def norm_robot(self, x):
        return self._norm_block(x, [self.robot_pos, self.robot_vel])

    def denorm_robot(self, x):
        return self._denorm_block(x, [self.robot_pos, self.robot_vel])

    def norm_object(self, x):
        return self._norm_block(x, [self.obj_pos, self.obj_vel])

    def denorm_object(self, x):
        return self._denorm_block(x, [self.obj_pos, self.obj_vel])

    def norm_action(self, x):
        return self._norm_block(x, [self.action])

    def norm_attr(self, x):
        return self._norm_block(x, [self.obj_attr])

    def norm_world(self, x):
        return self._norm_block(x, [self.world])

    def to_dict(self) -> dict:
        def pair(p):
            return {"mean": p[0].tolist(), "std": p[1].tolist()}

        return {k: pair(getattr(self, k))
                for k in ("robot_pos", "robot_vel", "obj_pos", "obj_vel", "action", "obj_attr", "world")}

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        def pair(v):
            return (np.asarray(v["mean"], dtype=np.float64), np.asarray(v["std"], dtype=np.float64))

        return NormStats(**{k: pair(d[k]) for k in
                            ("robot_pos", "robot_vel", "obj_pos", "obj_vel", "action", "obj_attr", "world")})
