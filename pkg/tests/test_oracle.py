"""Oracle simulator checks: closed-form physics, conservation laws,
episode determinism, and serialization round-trips."""

import json
import math

import numpy as np
import pytest

from gradworld.oracle import (
    BallTaskConfig,
    OracleObject,
    OracleWorld,
    PushTaskConfig,
    ball_rollout,
    combined_friction,
    default_robot,
    generate_ball_episode,
    generate_episode,
    load_episode,
    oracle_best_v0,
    phase_counts,
    save_episode,
    step,
)
from gradworld.oracle.ball import final_position_error


def make_cube(pos, vel=(0, 0, 0), half=0.02, mass=0.1, friction=0.5, color=(0.5, 0.5, 0.5)):
    h = np.full(3, half) if np.isscalar(half) else np.asarray(half, dtype=float)
    return OracleObject(
        position=np.array([pos[0], pos[1], h[2]], dtype=float),
        velocity=np.asarray(vel, dtype=float),
        orientation=np.array([1.0, 0.0, 0.0, 0.0]),
        half_size=h,
        mass=mass,
        friction=friction,
        color=np.asarray(color, dtype=float),
    )


def far_robot():
    return default_robot((0.35, 0.25))


class TestStep:
    def test_static_equilibrium(self):
        world = OracleWorld()
        cube = make_cube((0.0, 0.0))
        robot = far_robot()
        r2, objs2 = step(world, robot, [cube], np.zeros(3))
        np.testing.assert_allclose(objs2[0].position, cube.position)
        np.testing.assert_allclose(objs2[0].velocity, np.zeros(3))

    def test_friction_stop_time_closed_form(self):
        # v0 = 1 m/s, mu_eff = 0.5 -> stops after ~v0/(mu g) ~ 0.204 s.
        world = OracleWorld(table_friction=0.5)
        cube = make_cube((-0.2, 0.0), vel=(1.0, 0.0, 0.0), friction=0.5)
        assert combined_friction(cube.friction, world.table_friction) == pytest.approx(0.5)
        robot = far_robot()
        t, objs = 0.0, [cube]
        while np.linalg.norm(objs[0].velocity) > 0 and t < 1.0:
            robot, objs = step(world, robot, objs, np.zeros(3))
            t += world.dt
        expected = 1.0 / (0.5 * 9.81)
        assert abs(t - expected) <= world.dt

    def test_elastic_equal_mass_exchange(self):
        world = OracleWorld(restitution=1.0, table_friction=0.0)
        a = make_cube((-0.05, 0.0), vel=(0.5, 0.0, 0.0), friction=0.0, mass=0.1)
        b = make_cube((0.05, 0.0), vel=(0.0, 0.0, 0.0), friction=0.0, mass=0.1)
        robot = far_robot()
        objs = [a, b]
        for _ in range(20):
            robot, objs = step(world, robot, objs, np.zeros(3))
        np.testing.assert_allclose(objs[0].velocity[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(objs[1].velocity[0], 0.5, atol=1e-12)

    def test_momentum_conserved_in_impulse(self):
        world = OracleWorld(restitution=0.4, table_friction=0.0)
        a = make_cube((-0.03, 0.005), vel=(0.8, -0.1, 0.0), friction=0.0, mass=0.07)
        b = make_cube((0.03, -0.005), vel=(-0.2, 0.3, 0.0), friction=0.0, mass=0.23)
        robot = far_robot()
        objs = [a, b]
        for _ in range(30):
            p_before = objs[0].mass * objs[0].velocity + objs[1].mass * objs[1].velocity
            robot, objs = step(world, robot, objs, np.zeros(3))
            p_after = objs[0].mass * objs[0].velocity + objs[1].mass * objs[1].velocity
            np.testing.assert_allclose(p_after, p_before, atol=1e-9)

    def test_energy_non_increasing_without_actuation(self):
        world = OracleWorld(restitution=0.6)
        rng = np.random.default_rng(5)
        for trial in range(5):
            objs = [
                make_cube(rng.uniform(-0.1, 0.1, 2), vel=[*rng.uniform(-0.5, 0.5, 2), 0.0],
                          friction=rng.uniform(0.2, 0.8), mass=rng.uniform(0.05, 0.3))
                for _ in range(3)
            ]
            robot = far_robot()
            ke = sum(0.5 * o.mass * float(o.velocity @ o.velocity) for o in objs)
            for _ in range(40):
                robot, objs = step(world, robot, objs, np.zeros(3))
                ke_new = sum(0.5 * o.mass * float(o.velocity @ o.velocity) for o in objs)
                assert ke_new <= ke + 1e-12
                ke = ke_new

    def test_no_deep_interpenetration(self):
        world = OracleWorld()
        a = make_cube((-0.04, 0.0), vel=(1.0, 0.0, 0.0), mass=0.1)
        b = make_cube((0.04, 0.0), mass=0.1)
        robot = far_robot()
        objs = [a, b]
        v_max = 1.0
        for _ in range(30):
            robot, objs = step(world, robot, objs, np.zeros(3))
            gap = abs(objs[1].position[0] - objs[0].position[0])
            min_gap = objs[0].half_size[0] + objs[1].half_size[0]
            assert min_gap - gap <= world.dt * v_max + 1e-9

    def test_fallen_object_frozen(self):
        world = OracleWorld(table_friction=0.0)
        cube = make_cube((0.38, 0.0), vel=(2.0, 0.0, 0.0), friction=0.0)
        robot = far_robot()
        objs = [cube]
        for _ in range(10):
            robot, objs = step(world, robot, objs, np.zeros(3))
        assert objs[0].fallen
        frozen_pos = objs[0].position.copy()
        for _ in range(5):
            robot, objs = step(world, robot, objs, np.zeros(3))
        np.testing.assert_allclose(objs[0].position, frozen_pos)
        np.testing.assert_allclose(objs[0].velocity, np.zeros(3))

    def test_nan_input_rejected(self):
        world = OracleWorld()
        cube = make_cube((0.0, 0.0))
        cube.position[0] = np.nan
        with pytest.raises(ValueError):
            step(world, far_robot(), [cube], np.zeros(3))
        with pytest.raises(ValueError):
            step(world, far_robot(), [make_cube((0, 0))], np.array([np.nan, 0, 0]))

    def test_bad_dt_rejected(self):
        with pytest.raises(ValueError):
            OracleWorld(dt=0.0)

    def test_effector_pushes_cube(self):
        world = OracleWorld()
        cube = make_cube((0.0, 0.0), half=0.02)
        robot = default_robot((-0.06, 0.0))
        robot.effector_position[2] = robot.z_down
        objs = [cube]
        for _ in range(40):
            robot, objs = step(world, robot, objs, np.array([0.3, 0.0, 1.0]))
        assert objs[0].position[0] > 0.02  # carried along +x
        assert abs(objs[0].position[1]) < 0.01


class TestEpisodes:
    def test_same_seed_identical(self):
        a = generate_episode("push_hit", seed=9)
        b = generate_episode("push_hit", seed=9)
        assert np.array_equal(a.actions, b.actions)
        for sa, sb in zip(a.states, b.states):
            np.testing.assert_array_equal(sa.object_positions, sb.object_positions)
            np.testing.assert_array_equal(sa.robot_position, sb.robot_position)

    def test_unknown_phase_rejected(self):
        with pytest.raises(ValueError):
            generate_episode("fly", seed=0)

    def test_phase_ratio(self):
        counts = phase_counts(1.0)
        assert counts == {"random_move": 120, "push_random": 640, "push_hit": 1840}
        scaled = phase_counts(0.05)
        assert scaled == {"random_move": 6, "push_random": 32, "push_hit": 92}

    def test_push_speed_ordering(self):
        lo = generate_episode("push_hit", seed=11, cfg=PushTaskConfig(push_speed_override=0.2))
        hi = generate_episode("push_hit", seed=11, cfg=PushTaskConfig(push_speed_override=0.6))
        d = lambda ep: np.linalg.norm(
            ep.states[-1].object_positions[1, :2] - ep.states[0].object_positions[1, :2])
        assert d(hi) > d(lo)

    def test_push_hit_makes_contact(self):
        hits = 0
        for s in range(10):
            ep = generate_episode("push_hit", seed=s)
            d2 = np.linalg.norm(
                ep.states[-1].object_positions[1, :2] - ep.states[0].object_positions[1, :2])
            hits += d2 > 0.01
        assert hits >= 8

    def test_episode_fields_valid(self):
        ep = generate_episode("push_random", seed=4)
        ep.validate()
        for s in ep.states:
            s.validate()
        assert len(ep.states) == PushTaskConfig().episode_len
        assert ep.actions.shape == (len(ep.states), 3)


class TestEpisodeSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        ep = generate_episode("push_hit", seed=21)
        path = tmp_path / "ep.jsonl"
        save_episode(path, ep)
        loaded = load_episode(path)
        assert np.array_equal(loaded.actions, ep.actions)
        assert np.array_equal(loaded.descriptors.object_attrs, ep.descriptors.object_attrs)
        assert np.array_equal(loaded.descriptors.world, ep.descriptors.world)
        for sa, sb in zip(ep.states, loaded.states):
            assert np.array_equal(sa.object_positions, sb.object_positions)
            assert np.array_equal(sa.object_velocities, sb.object_velocities)
            assert np.array_equal(sa.object_quaternions, sb.object_quaternions)
            assert np.array_equal(sa.robot_rotation, sb.robot_rotation)
        # Saving the loaded episode reproduces the file byte-for-byte.
        path2 = tmp_path / "ep2.jsonl"
        save_episode(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_schema_frozen(self, tmp_path):
        """Field names of the episode file format are a frozen contract."""
        ep = generate_episode("push_hit", seed=2)
        path = tmp_path / "ep.jsonl"
        save_episode(path, ep)
        lines = path.read_text().strip().split("\n")
        header = json.loads(lines[0])
        assert set(header) == {"kind", "n_steps", "meta", "descriptors"}
        assert set(header["descriptors"]) == {"object_attrs", "world"}
        rec = json.loads(lines[1])
        assert set(rec) == {"t", "robot_state", "object_states", "action"}
        assert set(rec["robot_state"]) == {"position", "velocity", "rotation"}
        assert set(rec["object_states"][0]) == {"position", "velocity", "quaternion"}

    def test_ball_episode_robotless_round_trip(self, tmp_path):
        ep = generate_ball_episode(seed=3)
        assert not ep.states[0].has_robot
        path = tmp_path / "ball.jsonl"
        save_episode(path, ep)
        loaded = load_episode(path)
        assert not loaded.states[0].has_robot
        assert loaded.actions.shape == ep.actions.shape


class TestBall:
    def test_stationary_without_gravity(self):
        cfg = BallTaskConfig(gravity=0.0, start=(0.0, 0.0, 0.5), horizon=20)
        pos, vel = ball_rollout(np.zeros(3), cfg)
        np.testing.assert_allclose(pos[-1], [0.0, 0.0, 0.5])
        np.testing.assert_allclose(vel[-1], np.zeros(3))

    def test_rebound_apex_energy(self):
        # Drop from h: apex after one bounce ~ e^2 h. The energy argument is a
        # continuous-time statement, so check at fine dt where the O(dt)
        # impact-velocity quantization is negligible.
        h, e = 1.0, 0.8
        cfg = BallTaskConfig(start=(0.0, 0.0, h), restitution=e, horizon=700,
                             radius=0.01, dt=0.002)
        pos, vel = ball_rollout(np.zeros(3), cfg)
        z = pos[:, 2]
        impact = int(np.argmax(z <= cfg.radius + 1e-9))
        apex = z[impact:].max()
        expected = e * e * (h - cfg.radius) + cfg.radius
        assert abs(apex - expected) / expected < 0.05

    def test_wall_bounce_reverses_y(self):
        cfg = BallTaskConfig(start=(0.0, 0.0, 1.0), horizon=40)
        pos, vel = ball_rollout(np.array([0.0, 4.0, 0.0]), cfg)
        assert pos[:, 1].max() <= cfg.wall_y - cfg.radius + 1e-9
        assert vel[-1, 1] < 0

    def test_frozen_target_is_reachable(self):
        cfg = BallTaskConfig()
        err = final_position_error(np.array([0.0, 3.0, 1.0]), cfg)
        assert err < 1e-20

    def test_oracle_reference_reaches_target(self):
        cfg = BallTaskConfig()
        v0, loss = oracle_best_v0(cfg)
        assert loss < 1e-6
        assert np.all(v0 >= np.asarray(cfg.v0_low) - 1.0)
        assert np.all(v0 <= np.asarray(cfg.v0_high) + 1.0)
