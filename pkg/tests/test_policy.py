"""Reward formulas, soft-min convergence, BPTT gradient checks, REINFORCE
estimator properties, trainer smoke runs."""

import math

import numpy as np
import pytest
from scipy import stats as scistats

from gradworld import autodiff as ad
from gradworld.dynamics import DynamicsCore, ModelConfig, init_params
from gradworld.oracle import PushTaskConfig, generate_episode
from gradworld.policy import (
    DegenerateRewardError,
    PolicyConfig,
    RewardSpec,
    analytic_policy_grad,
    evaluate_policy,
    init_policy_params,
    load_policy,
    make_scene_pool,
    history_to_csv,
    policy_forward,
    policy_model_rollout,
    reward_surrogate,
    run_policy_in_oracle,
    save_policy,
    score_function_grads,
    softmin,
    success,
    terminal_rewards,
    train_policy_bptt,
    train_policy_reinforce,
)
from gradworld.representation import NormStats

from fd import central_diff, rel_err


@pytest.fixture(scope="module")
def episodes():
    return [generate_episode("push_hit", seed=s) for s in range(6)]


@pytest.fixture(scope="module")
def core(episodes):
    cfg = ModelConfig(latent_dim=16, hidden_dim=24, cond_dim=12, n_layers=1,
                      n_heads=2, mlp_hidden=24, enc_hidden=24, dec_hidden=24)
    stats = NormStats.from_episodes(episodes)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(11)
    for k in params:
        params[k] = params[k] + rng.standard_normal(params[k].shape) * 0.05
    return DynamicsCore(cfg, params, stats)


def straight_traces(T=20):
    robot = np.tile([0.3, 0.2], (T + 1, 1))
    c1 = np.tile([0.0, 0.0], (T + 1, 1))
    c2 = np.tile([0.1, 0.0], (T + 1, 1))
    return robot, c1, c2


class TestTerminalRewards:
    def test_no_motion_all_zero(self):
        spec = RewardSpec(border_x=0.4)
        r = terminal_rewards(*straight_traces(), spec)
        assert r["r1"] == pytest.approx(0.0)
        assert r["r2"] == pytest.approx(0.0)
        assert r["r3"] == pytest.approx(0.0)
        assert r["total"] == pytest.approx(0.0)

    def test_cube2_at_border_r3_one(self):
        spec = RewardSpec(border_x=0.4)
        robot, c1, c2 = straight_traces()
        c2 = c2.copy()
        c2[-1] = [0.4, 0.0]
        r = terminal_rewards(robot, c1, c2, spec)
        assert r["r3"] == pytest.approx(1.0)

    def test_contact_episode_r1_formula(self):
        """On an oracle push episode the hard formula reproduces a direct
        min-distance computation, and the approach drives r1 most of the way
        toward 1."""
        ep = generate_episode("push_hit", seed=5)
        spec = RewardSpec(border_x=0.4)
        robot_xy = np.stack([s.robot_position[:2] for s in ep.states])
        c1_xy = np.stack([s.object_positions[0, :2] for s in ep.states])
        c2_xy = np.stack([s.object_positions[1, :2] for s in ep.states])
        r = terminal_rewards(robot_xy, c1_xy, c2_xy, spec)
        d = np.linalg.norm(robot_xy - c1_xy, axis=-1)
        assert r["r1"] == pytest.approx(1.0 - d[1:].min() / d[0])
        # contact: min distance is near effector radius + cube half extent
        half = ep.descriptors.object_attrs[0, :2].max()
        assert d[1:].min() < 0.02 + half + 0.02
        assert r["r1"] > 0.5

    def test_zero_initial_distance_rejected(self):
        spec = RewardSpec(border_x=0.4)
        robot, c1, c2 = straight_traces()
        with pytest.raises(DegenerateRewardError):
            terminal_rewards(c1, c1, c2, spec)
        c2_at_border = c2.copy()
        c2_at_border[:] = [0.4, 0.0]
        with pytest.raises(DegenerateRewardError):
            terminal_rewards(robot, c1, c2_at_border, spec)


class TestSuccess:
    def test_stationary_false(self):
        pos = np.tile([0.1, 0.0, 0.02], (30, 1))
        assert success(pos) is False

    def test_boundary_cases(self):
        pos = np.tile([0.0, 0.0, 0.02], (10, 1))
        over = pos.copy()
        over[-1, 0] = 0.051
        under = pos.copy()
        under[-1, 0] = 0.049
        assert success(over) is True
        assert success(under) is False


class TestSoftmin:
    def test_bound_vs_hard_min(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            T = int(rng.integers(2, 60))
            tau = float(rng.uniform(0.005, 0.1))
            d = rng.uniform(0.1, 2.0, size=(T, 3))
            sm = softmin(d, tau).values
            hard = d.min(axis=0)
            assert np.all(sm <= hard + 1e-12)
            assert np.all(np.abs(sm - hard) < tau * math.log(T) + 1e-12)

    def test_converges_as_tau_to_zero(self):
        d = np.random.default_rng(1).uniform(0.1, 1.0, size=(30, 2))
        hard = d.min(axis=0)
        for tau in (0.1, 0.01, 0.001):
            gap = np.abs(softmin(d, tau).values - hard).max()
            assert gap <= tau * math.log(30) + 1e-12

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(2)
        d0 = rng.uniform(0.2, 1.0, size=(8, 2))
        with ad.Tape() as tape:
            d = tape.leaf(d0)
            out = ad.sum_(softmin(d, 0.05))
        g = ad.backward(tape, out)[d.node_id].values
        fd = central_diff(lambda x: float(softmin(x, 0.05).values.sum()), [d0], 0)
        assert rel_err(g, fd) < 1e-4


class TestSurrogate:
    def test_matches_hard_within_bound(self):
        rng = np.random.default_rng(3)
        T = 15
        spec = RewardSpec(border_x=0.4, tau=0.01)
        robot = rng.uniform(-0.2, 0.2, (T + 1, 1, 2))
        c1 = rng.uniform(-0.2, 0.2, (T + 1, 1, 2))
        c2 = rng.uniform(-0.2, 0.2, (T + 1, 1, 2))
        soft = reward_surrogate([ad.Tensor(robot[t]) for t in range(T + 1)],
                                [ad.Tensor(c1[t]) for t in range(T + 1)],
                                [ad.Tensor(c2[t]) for t in range(T + 1)], spec).item()
        hard = terminal_rewards(robot[:, 0], c1[:, 0], c2[:, 0], spec)["total"]
        # soft-min underestimates each min -> surrogate >= hard total; gap bounded
        assert soft >= hard - 1e-12
        assert soft - hard <= 2 * spec.tau * math.log(T) / min(
            np.linalg.norm(robot[0, 0] - c1[0, 0]), np.linalg.norm(c1[0, 0] - c2[0, 0])) + 1e-9


class TestAnalyticPolicyGrad:
    def test_one_step_chain_rule_closed_form(self):
        """T=1, linear dynamics x1 = x0 + A a, quadratic R = -|x1 - g|^2,
        linear policy a = theta: gradient equals -2 A^T (x1 - g)."""
        rng = np.random.default_rng(4)
        A = rng.standard_normal((3, 2))
        x0 = rng.standard_normal(3)
        g = rng.standard_normal(3)
        theta0 = rng.standard_normal(2)
        with ad.Tape() as tape:
            theta = tape.leaf(theta0)
            x1 = ad.add(x0, ad.reshape(ad.matmul(ad.reshape(theta, (1, 2)),
                                                 A.T), (3,)))
            diff = ad.sub(x1, g)
            R = ad.neg(ad.sum_(ad.mul(diff, diff)))
        grad = ad.backward(tape, R)[theta.node_id].values
        x1v = x0 + A @ theta0
        expected = -2.0 * A.T @ (x1v - g)
        np.testing.assert_allclose(grad, expected, rtol=1e-12)

    def test_grad_matches_fd_probe_t10(self, core, episodes):
        cfg = PolicyConfig(horizon=10)
        pool = make_scene_pool(2, PushTaskConfig(), seed=0)
        pi = init_policy_params(cfg, seed=0)
        spec = RewardSpec(border_x=0.4, tau=0.02)
        grads, J = analytic_policy_grad(core, pi, cfg, pool, spec, T=10, clip_norm=1e9)

        def objective(pi_arrays):
            J_val, _ = policy_model_rollout(core, pi_arrays, cfg, pool, spec, T=10)
            return float(J_val.values)

        rng = np.random.default_rng(5)
        name = "pi.w0"
        flat_idx = rng.choice(pi[name].size, size=10, replace=False)
        for idx in flat_idx:
            eps = 1e-5
            pp = {k: v.copy() for k, v in pi.items()}
            pp[name].ravel()[idx] += eps
            f_plus = objective(pp)
            pp[name].ravel()[idx] -= 2 * eps
            f_minus = objective(pp)
            fd = (f_plus - f_minus) / (2 * eps)
            analytic = grads[name].ravel()[idx]
            assert abs(analytic - fd) / (abs(fd) + 1e-8) < 1e-3

    def test_grad_norm_clipped_and_finite(self, core):
        cfg = PolicyConfig(horizon=8)
        pool = make_scene_pool(3, PushTaskConfig(), seed=1)
        spec = RewardSpec(border_x=0.4)
        for seed in range(3):
            pi = init_policy_params(cfg, seed=seed)
            grads, J = analytic_policy_grad(core, pi, cfg, pool, spec, T=8, clip_norm=5.0)
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            assert np.isfinite(J)
            assert total <= 5.0 + 1e-9


class TestReinforce:
    def test_zero_noise_rejected(self, core):
        cfg = PolicyConfig(sigma_explore=0.0)
        with pytest.raises(ValueError):
            train_policy_reinforce(core.stats, cfg, PushTaskConfig(), episodes_budget=1)

    def test_score_grad_machinery_exact(self, core):
        """score_function_grads equals advantage * sum_t (eps/sigma^2 . dmu/dtheta),
        checked against a direct tape computation on one pseudo-episode."""
        cfg = PolicyConfig()
        pi = init_policy_params(cfg, seed=2)
        rng = np.random.default_rng(6)
        feats = [rng.standard_normal((1, cfg.input_dim)) for _ in range(3)]
        noises = [rng.normal(0, 0.2, 3) for _ in range(3)]
        adv, sigma = 1.7, 0.2
        got = score_function_grads(pi, cfg, feats, noises, sigma, adv)

        with ad.Tape() as tape:
            leaves = tape.leaves(pi)
            total = None
            for f, e in zip(feats, noises):
                mu = policy_forward(leaves, f, cfg)
                term = ad.sum_(ad.mul(mu, e[None, :] / sigma**2))
                total = term if total is None else ad.add(total, term)
            total = ad.mul(total, adv)
        want = ad.grads_by_name(ad.backward(tape, total), leaves)
        for k in got:
            np.testing.assert_allclose(got[k], want[k], atol=1e-12)

    def test_bandit_estimator_unbiased(self):
        """Gaussian-policy two-outcome bandit: empirical score-function
        gradient over 1e5 samples sits within 3 standard errors of the exact
        gradient d Phi(mu/sigma) / d mu = phi(mu/sigma)/sigma."""
        rng = np.random.default_rng(7)
        mu, sigma = 0.3, 0.5
        n = 100_000
        eps = rng.normal(0.0, sigma, n)
        a = mu + eps
        R = (a > 0).astype(np.float64)
        samples = R * eps / sigma**2
        est = samples.mean()
        se = samples.std(ddof=1) / math.sqrt(n)
        exact = scistats.norm.pdf(mu / sigma) / sigma
        assert abs(est - exact) < 3 * se


class TestTrainers:
    def test_bptt_smoke_and_determinism(self, core):
        cfg = PolicyConfig(horizon=6, hidden=(16, 16))
        kw = dict(episodes_budget=8, batch=4, n_train_scenes=4, n_eval_scenes=4,
                  eval_every=1, seed=0)
        pi1, h1 = train_policy_bptt(core, cfg, PushTaskConfig(), **kw)
        pi2, h2 = train_policy_bptt(core, cfg, PushTaskConfig(), **kw)
        assert len(h1) >= 1
        assert h1[-1]["total"] == h2[-1]["total"]
        for k in pi1:
            assert np.array_equal(pi1[k], pi2[k])

    def test_reinforce_smoke(self, core):
        cfg = PolicyConfig(horizon=6, hidden=(16, 16))
        pi, hist = train_policy_reinforce(core.stats, cfg, PushTaskConfig(),
                                          episodes_budget=6, n_train_scenes=3,
                                          n_eval_scenes=3, eval_every=3, seed=0)
        assert len(hist) == 2
        assert {"episode", "r1", "r2", "r3", "total", "success_rate"} <= set(hist[0])

    def test_history_csv_schema(self, core):
        hist = [{"episode": 8, "r1": 0.1, "r2": 0.2, "r3": 0.3, "total": 0.6,
                 "success_rate": 0.25, "J_train": 0.5}]
        csv = history_to_csv(hist)
        assert csv.splitlines()[0] == "episode,r1,r2,r3,total,oracle_success"
        assert csv.splitlines()[1].startswith("8,0.1")

    def test_policy_checkpoint_round_trip(self, tmp_path):
        cfg = PolicyConfig(hidden=(8, 8))
        pi = init_policy_params(cfg, seed=0)
        p = tmp_path / "pi.json"
        save_policy(p, pi, cfg)
        loaded, cfg2 = load_policy(p)
        assert cfg2.hidden == cfg.hidden
        for k in pi:
            assert np.array_equal(loaded[k], pi[k])

    def test_actions_respect_bounds(self):
        cfg = PolicyConfig()
        pi = init_policy_params(cfg, seed=1)
        feats = np.random.default_rng(0).standard_normal((5, cfg.input_dim)) * 3
        a = policy_forward(pi, feats, cfg).values
        assert np.all(np.abs(a[:, :2]) <= cfg.v_max)
        assert np.all((a[:, 2] >= 0) & (a[:, 2] <= 1))
