"""Analytic ground-truth simulator: planar push/hit environment.

Semi-implicit Euler on a tabletop. The effector is a kinematic vertical
cylinder commanded by (vx, vy, press); cubes are axis-aligned boxes that
slide under Coulomb friction and exchange impulses on contact. Deterministic
and non-differentiable by design: this is the reference the learned dynamics
is trained against and evaluated in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OracleWorld:
    gravity: float = 9.81            # magnitude, acts along -z
    table_friction: float = 0.5      # Coulomb coefficient of the table surface
    restitution: float = 0.3         # shared contact restitution in [0, 1]
    dt: float = 0.02                 # seconds per step
    table_bounds: tuple = (-0.4, 0.4, -0.3, 0.3)  # x_min, x_max, y_min, y_max (m)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.table_friction < 0:
            raise ValueError("table_friction must be non-negative")
        if not (0.0 <= self.restitution <= 1.0):
            raise ValueError("restitution must lie in [0, 1]")


@dataclass
class OracleObject:
    position: np.ndarray             # (3,) m; z = half_size[2] while on the table
    velocity: np.ndarray             # (3,) m/s
    orientation: np.ndarray          # (4,) unit quaternion wxyz
    half_size: np.ndarray            # (3,) m
    mass: float                      # kg
    friction: float                  # dimensionless
    color: np.ndarray                # (3,) rgb in [0, 1]
    fallen: bool = False

    def validate(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")
        if np.any(self.half_size <= 0):
            raise ValueError("half_size must be positive")
        n = np.linalg.norm(self.orientation)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {n} != 1")

    def copy(self) -> "OracleObject":
        return OracleObject(
            self.position.copy(), self.velocity.copy(), self.orientation.copy(),
            self.half_size.copy(), self.mass, self.friction, self.color.copy(), self.fallen,
        )


@dataclass
class OracleRobot:
    effector_position: np.ndarray    # (3,) m
    effector_velocity: np.ndarray    # (3,) m/s
    orientation: np.ndarray          # (3, 3) rotation matrix
    effector_radius: float = 0.02
    z_up: float = 0.12               # raised effector height (no contact possible)
    z_down: float = 0.01             # pressed effector height
    z_speed: float = 0.6             # max vertical speed, m/s
    turn_rate: float = 8.0           # max yaw rate, rad/s

    def copy(self) -> "OracleRobot":
        return OracleRobot(
            self.effector_position.copy(), self.effector_velocity.copy(),
            self.orientation.copy(), self.effector_radius, self.z_up, self.z_down,
            self.z_speed, self.turn_rate,
        )


def default_robot(position=(0.3, 0.2), radius: float = 0.02) -> OracleRobot:
    return OracleRobot(
        effector_position=np.array([position[0], position[1], 0.12]),
        effector_velocity=np.zeros(3),
        orientation=np.eye(3),
        effector_radius=radius,
    )


def combined_friction(object_friction: float, table_friction: float) -> float:
    """Geometric-mean combination of object and table coefficients."""
    return math.sqrt(max(object_friction, 0.0) * max(table_friction, 0.0))


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _closest_point_on_rect(p, center, half):
    return np.clip(p, center - half, center + half)


def _effector_cube_contact(robot: OracleRobot, obj: OracleObject, restitution: float):
    """Resolve disc-vs-AABB contact in the plane; effector is kinematic."""
    if robot.effector_position[2] >= 2.0 * obj.half_size[2]:
        return
    pe = robot.effector_position[:2]
    c = obj.position[:2]
    h = obj.half_size[:2]
    closest = _closest_point_on_rect(pe, c, h)
    delta = pe - closest
    dist = float(np.linalg.norm(delta))
    r = robot.effector_radius
    if dist >= r:
        return
    if dist > 1e-12:
        n_push = -delta / dist  # from effector toward the cube
        penetration = r - dist
    else:
        # Effector center inside the footprint: push out along min-penetration axis.
        over = h + r - np.abs(pe - c)
        axis = int(np.argmin(over))
        sign = 1.0 if c[axis] >= pe[axis] else -1.0
        n_push = np.zeros(2)
        n_push[axis] = sign
        penetration = float(over[axis])
    v_rel = float(np.dot(obj.velocity[:2] - robot.effector_velocity[:2], n_push))
    if v_rel < 0.0:
        obj.velocity[:2] += -(1.0 + restitution) * v_rel * n_push
    obj.position[:2] += penetration * n_push


def _cube_cube_contact(a: OracleObject, b: OracleObject, restitution: float):
    """Impulse + positional correction for two dynamic AABBs; conserves momentum."""
    d = b.position[:2] - a.position[:2]
    overlap = a.half_size[:2] + b.half_size[:2] - np.abs(d)
    if overlap[0] <= 0.0 or overlap[1] <= 0.0:
        return
    axis = int(np.argmin(overlap))
    n = np.zeros(2)
    n[axis] = 1.0 if d[axis] >= 0.0 else -1.0  # from a toward b
    v_rel = float(np.dot(b.velocity[:2] - a.velocity[:2], n))
    inv_ma, inv_mb = 1.0 / a.mass, 1.0 / b.mass
    if v_rel < 0.0:
        j = -(1.0 + restitution) * v_rel / (inv_ma + inv_mb)
        a.velocity[:2] -= (j * inv_ma) * n
        b.velocity[:2] += (j * inv_mb) * n
    share_a = inv_ma / (inv_ma + inv_mb)
    a.position[:2] -= overlap[axis] * share_a * n
    b.position[:2] += overlap[axis] * (1.0 - share_a) * n


def step(world: OracleWorld, robot: OracleRobot, objects: list, action: np.ndarray):
    """Advance one timestep; returns fresh (robot, objects) without mutating inputs.

    Action layout: [vx, vy, press, ...]; press > 0.5 lowers the effector to
    contact height. Extra action dims are ignored by the oracle (they exist so
    wider command conventions remain expressible).
    """
    action = np.asarray(action, dtype=np.float64)
    if np.any(~np.isfinite(action)):
        raise ValueError("non-finite action")
    for o in objects:
        if np.any(~np.isfinite(o.position)) or np.any(~np.isfinite(o.velocity)):
            raise ValueError("non-finite object state")
    if np.any(~np.isfinite(robot.effector_position)):
        raise ValueError("non-finite robot state")
    if world.dt <= 0:
        raise ValueError("dt must be positive")

    dt = world.dt
    robot = robot.copy()
    objects = [o.copy() for o in objects]

    # Kinematic effector: planar velocity straight from the command, vertical
    # motion toward the press target, yaw toward the motion heading.
    vx, vy = float(action[0]), float(action[1])
    press = float(action[2]) if action.shape[0] > 2 else 1.0
    z_target = robot.z_down if press > 0.5 else robot.z_up
    z = robot.effector_position[2]
    vz = np.clip((z_target - z) / dt, -robot.z_speed, robot.z_speed)
    robot.effector_velocity = np.array([vx, vy, vz])
    robot.effector_position = robot.effector_position + robot.effector_velocity * dt

    speed = math.hypot(vx, vy)
    if speed > 0.02:
        theta = math.atan2(robot.orientation[1, 0], robot.orientation[0, 0])
        target = math.atan2(vy, vx)
        dtheta = np.clip(_wrap_angle(target - theta), -robot.turn_rate * dt, robot.turn_rate * dt)
        robot.orientation = rot_z(theta + dtheta)

    # Coulomb friction decelerates sliding cubes.
    for o in objects:
        if o.fallen:
            continue
        sp = float(np.linalg.norm(o.velocity[:2]))
        if sp > 0.0:
            mu = combined_friction(o.friction, world.table_friction)
            dv = mu * world.gravity * dt
            if sp <= dv:
                o.velocity[:2] = 0.0
            else:
                o.velocity[:2] -= dv * o.velocity[:2] / sp

    # Contact resolution: effector first, then pairwise cube contacts
    # (two sweeps settle transitive pile-ups at this scale).
    live = [o for o in objects if not o.fallen]
    for o in live:
        _effector_cube_contact(robot, o, world.restitution)
    for _ in range(2):
        for i in range(len(live)):
            for j in range(i + 1, len(live)):
                _cube_cube_contact(live[i], live[j], world.restitution)

    # Integrate positions with post-impulse velocities.
    x0, x1, y0, y1 = world.table_bounds
    for o in objects:
        if o.fallen:
            continue
        o.position = o.position + o.velocity * dt
        if not (x0 <= o.position[0] <= x1 and y0 <= o.position[1] <= y1):
            o.fallen = True
            o.velocity = np.zeros(3)

    return robot, objects
