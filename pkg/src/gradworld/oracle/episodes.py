"""Scripted data collection in the oracle push environment.

Three phases: free-roaming effector moves, pushes toward a random direction,
and pushes aimed to hit a second cube. Scene physical parameters (cube
friction, density, size, color) are randomized per episode. Everything is
deterministic in the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from ..representation import (
    Episode,
    PhysicalState,
    SceneDescriptors,
    make_object_attrs,
    make_world_vector,
)
from .world import OracleObject, OracleRobot, OracleWorld, default_robot, step

PHASES = ("random_move", "push_random", "push_hit")

# Paper-scale dataset split across the three phases.
PHASE_RATIO = {"random_move": 120, "push_random": 640, "push_hit": 1840}


@dataclass
class PushTaskConfig:
    n_objects: int = 2
    episode_len: int = 101            # number of recorded states
    action_dim: int = 3               # (vx, vy, press); wider conventions allowed
    dt: float = 0.02
    gravity: float = 9.81
    table_friction: float = 0.5
    restitution: float = 0.3
    table_bounds: tuple = (-0.4, 0.4, -0.3, 0.3)
    effector_radius: float = 0.02
    # randomization ranges (documented config defaults, not paper claims)
    half_size_range: tuple = (0.018, 0.03)
    density_range: tuple = (400.0, 1200.0)
    friction_range: tuple = (0.2, 0.8)
    push_speed_range: tuple = (0.25, 0.55)
    push_len_range: tuple = (0.12, 0.22)
    approach_speed: float = 0.5
    approach_dist: float = 0.07
    push_speed_override: float | None = None   # pin the push speed (ablations/tests)

    def world(self) -> OracleWorld:
        return OracleWorld(
            gravity=self.gravity,
            table_friction=self.table_friction,
            restitution=self.restitution,
            dt=self.dt,
            table_bounds=self.table_bounds,
        )


def sample_scene(rng: np.random.Generator, cfg: PushTaskConfig):
    """Randomized cubes + robot start; returns (robot, objects, descriptors)."""
    objects = []
    positions = []
    x0, x1, y0, y1 = cfg.table_bounds
    margin = 0.08
    for i in range(cfg.n_objects):
        half = rng.uniform(*cfg.half_size_range, size=3)
        density = rng.uniform(*cfg.density_range)
        mass = density * float(np.prod(2.0 * half))
        friction = rng.uniform(*cfg.friction_range)
        color = rng.uniform(0.1, 0.95, size=3)
        for _ in range(100):
            pos_xy = rng.uniform([x0 + margin, y0 + margin], [x1 - margin, y1 - margin])
            if i == 0:
                break
            d = min(np.linalg.norm(pos_xy - p) for p in positions)
            if 0.09 <= d <= 0.18:
                break
        positions.append(pos_xy)
        objects.append(OracleObject(
            position=np.array([pos_xy[0], pos_xy[1], half[2]]),
            velocity=np.zeros(3),
            orientation=np.array([1.0, 0.0, 0.0, 0.0]),
            half_size=half,
            mass=mass,
            friction=friction,
            color=color,
        ))
    # Effector starts near a table corner, raised.
    corner = rng.integers(0, 4)
    cx = x0 + 0.05 if corner in (0, 1) else x1 - 0.05
    cy = y0 + 0.05 if corner in (0, 2) else y1 - 0.05
    robot = default_robot((cx, cy), radius=cfg.effector_radius)
    attrs = np.stack([make_object_attrs(o.half_size, o.mass, o.friction, o.color) for o in objects])
    world_vec = make_world_vector(cfg.gravity, cfg.table_friction, cfg.restitution, cfg.table_bounds)
    descriptors = SceneDescriptors(object_attrs=attrs, world=world_vec)
    return robot, objects, descriptors


def to_physical_state(robot: OracleRobot | None, objects: list) -> PhysicalState:
    return PhysicalState(
        robot_position=None if robot is None else robot.effector_position.copy(),
        robot_velocity=None if robot is None else robot.effector_velocity.copy(),
        robot_rotation=None if robot is None else robot.orientation.reshape(9).copy(),
        object_positions=np.stack([o.position for o in objects]),
        object_velocities=np.stack([o.velocity for o in objects]),
        object_quaternions=np.stack([o.orientation for o in objects]),
    )


class _ScriptedPolicy:
    """Stage-machine controller producing (vx, vy, press) commands."""

    def __init__(self, phase: str, rng: np.random.Generator, cfg: PushTaskConfig, objects: list):
        self.cfg = cfg
        self.phase = phase
        if phase == "random_move":
            n_way = rng.integers(2, 5)
            x0, x1, y0, y1 = cfg.table_bounds
            self.waypoints = rng.uniform([x0 + 0.03, y0 + 0.03], [x1 - 0.03, y1 - 0.03], size=(n_way, 2))
            self.press = rng.uniform(0, 1, size=n_way) < 0.3
            self.speed = rng.uniform(0.2, 0.5)
            self.idx = 0
            return
        c1 = objects[0].position[:2]
        if phase == "push_hit":
            c2 = objects[1].position[:2]
            direction = c2 - c1
            direction = direction / np.linalg.norm(direction)
        elif phase == "push_random":
            ang = rng.uniform(0, 2 * math.pi)
            direction = np.array([math.cos(ang), math.sin(ang)])
        else:
            raise ValueError(f"unknown phase: {phase!r}")
        self.direction = direction
        offset = cfg.approach_dist + float(objects[0].half_size[:2].max())
        self.start = c1 - direction * offset
        speed = cfg.push_speed_override
        if speed is None:
            speed = rng.uniform(*cfg.push_speed_range)
        self.push_speed = speed
        if phase == "push_hit":
            # Push far enough that the first cube is carried into the second.
            separation = float(np.linalg.norm(objects[1].position[:2] - c1))
            push_len = offset + separation + 0.02
        else:
            push_len = rng.uniform(*cfg.push_len_range)
        self.push_steps = max(1, int(round(push_len / (speed * cfg.dt))))
        self.settle_steps = 5
        self.stage = "approach"
        self.stage_count = 0

    def __call__(self, robot: OracleRobot) -> np.ndarray:
        cfg = self.cfg
        pos = robot.effector_position[:2]
        if self.phase == "random_move":
            target = self.waypoints[self.idx]
            delta = target - pos
            dist = float(np.linalg.norm(delta))
            if dist < 0.015 and self.idx < len(self.waypoints) - 1:
                self.idx += 1
                target = self.waypoints[self.idx]
                delta = target - pos
                dist = float(np.linalg.norm(delta))
            if dist < 1e-9:
                v = np.zeros(2)
            else:
                v = delta / dist * min(self.speed, dist / cfg.dt)
            return np.array([v[0], v[1], 1.0 if self.press[self.idx] else 0.0])

        if self.stage == "approach":
            delta = self.start - pos
            dist = float(np.linalg.norm(delta))
            if dist < 0.01:
                self.stage = "settle"
                self.stage_count = 0
                return np.array([0.0, 0.0, 1.0])
            v = delta / dist * min(cfg.approach_speed, dist / cfg.dt)
            return np.array([v[0], v[1], 0.0])
        if self.stage == "settle":
            self.stage_count += 1
            if self.stage_count >= self.settle_steps:
                self.stage = "push"
                self.stage_count = 0
            return np.array([0.0, 0.0, 1.0])
        if self.stage == "push":
            self.stage_count += 1
            if self.stage_count >= self.push_steps:
                self.stage = "hold"
            return np.array([self.direction[0] * self.push_speed,
                             self.direction[1] * self.push_speed, 1.0])
        return np.array([0.0, 0.0, 1.0])  # hold: remain stationary


def generate_episode(phase: str, seed: int, cfg: PushTaskConfig | None = None) -> Episode:
    """Roll one scripted episode; deterministic in (phase, seed, cfg)."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    cfg = cfg or PushTaskConfig()
    rng = np.random.default_rng(seed)
    world = cfg.world()
    robot, objects, descriptors = sample_scene(rng, cfg)
    policy = _ScriptedPolicy(phase, rng, cfg, objects)

    states = [to_physical_state(robot, objects)]
    actions = []
    for _ in range(cfg.episode_len - 1):
        cmd = policy(robot)
        action = np.zeros(cfg.action_dim)
        action[: min(3, cfg.action_dim)] = cmd[: min(3, cfg.action_dim)]
        robot, objects = step(world, robot, objects, action)
        states.append(to_physical_state(robot, objects))
        actions.append(action)
    actions.append(np.zeros(cfg.action_dim))  # placeholder at the final state
    ep = Episode(
        descriptors=descriptors,
        states=states,
        actions=np.stack(actions),
        meta={"phase": phase, "seed": int(seed), "dt": cfg.dt, "action_dim": cfg.action_dim},
    )
    ep.validate()
    return ep


def phase_counts(scale: float = 1.0) -> dict:
    """Dataset split across phases at a given scale of the full ratio."""
    return {k: max(1, int(round(v * scale))) for k, v in PHASE_RATIO.items()}


# ---------------------------------------------------------------------------
# episode serialization (JSONL; one self-describing record per line)


def _state_record(t: int, s: PhysicalState, action: np.ndarray) -> dict:
    rec = {
        "t": t,
        "robot_state": None,
        "object_states": [
            {
                "position": s.object_positions[i].tolist(),
                "velocity": s.object_velocities[i].tolist(),
                "quaternion": s.object_quaternions[i].tolist(),
            }
            for i in range(s.n_objects)
        ],
        "action": action.tolist(),
    }
    if s.has_robot:
        rec["robot_state"] = {
            "position": s.robot_position.tolist(),
            "velocity": s.robot_velocity.tolist(),
            "rotation": s.robot_rotation.tolist(),
        }
    return rec


def save_episode(path, episode: Episode) -> None:
    lines = []
    header = {
        "kind": "header",
        "n_steps": len(episode.states),
        "meta": episode.meta,
        "descriptors": {
            "object_attrs": episode.descriptors.object_attrs.tolist(),
            "world": episode.descriptors.world.tolist(),
        },
    }
    lines.append(json.dumps(header))
    for t, s in enumerate(episode.states):
        lines.append(json.dumps(_state_record(t, s, episode.actions[t])))
    Path(path).write_text("\n".join(lines) + "\n")


def load_episode(path) -> Episode:
    lines = Path(path).read_text().strip().split("\n")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise ValueError(f"episode file missing header record: {path}")
    desc = SceneDescriptors(
        object_attrs=np.asarray(header["descriptors"]["object_attrs"], dtype=np.float64),
        world=np.asarray(header["descriptors"]["world"], dtype=np.float64),
    )
    states, actions = [], []
    for line in lines[1:]:
        rec = json.loads(line)
        rs = rec["robot_state"]
        states.append(PhysicalState(
            robot_position=None if rs is None else np.asarray(rs["position"]),
            robot_velocity=None if rs is None else np.asarray(rs["velocity"]),
            robot_rotation=None if rs is None else np.asarray(rs["rotation"]),
            object_positions=np.asarray([o["position"] for o in rec["object_states"]]),
            object_velocities=np.asarray([o["velocity"] for o in rec["object_states"]]),
            object_quaternions=np.asarray([o["quaternion"] for o in rec["object_states"]]),
        ))
        actions.append(np.asarray(rec["action"], dtype=np.float64))
    n_act = len(actions[0]) if actions else 0
    return Episode(
        descriptors=desc,
        states=states,
        actions=np.asarray(actions).reshape(len(actions), n_act),
        meta=header.get("meta", {}),
    )


def save_dataset(out_dir, episodes: list, manifest_extra: dict | None = None) -> Path:
    """Write episodes plus a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, ep in enumerate(episodes):
        name = f"episode_{i:05d}.jsonl"
        save_episode(out / name, ep)
        files.append({"file": name, "phase": ep.meta.get("phase"), "seed": ep.meta.get("seed")})
    manifest = {"n_episodes": len(episodes), "files": files}
    manifest.update(manifest_extra or {})
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2))
    return mpath


def load_dataset(data_dir) -> list:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    return [load_episode(data_dir / entry["file"]) for entry in manifest["files"]]
