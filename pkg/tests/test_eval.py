"""Evaluation metrics: TrajErr sharing, report aggregation consistency,
rollout modes, OOD plumbing, scaling probe."""

import math

import numpy as np
import pytest

from gradworld.dynamics import DynamicsCore, ModelConfig, init_params
from gradworld.evalmetrics import (
    EVAL_MODES,
    EvalReport,
    eval_episodes,
    eval_rollout_modes,
    ood_eval,
    scaling_probe,
    traj_err,
)
from gradworld.oracle import generate_episode
from gradworld.representation import NormStats, state_loss


@pytest.fixture(scope="module")
def episodes():
    return [generate_episode("push_hit", seed=s) for s in range(4)]


@pytest.fixture(scope="module")
def core(episodes):
    cfg = ModelConfig(latent_dim=16, hidden_dim=24, cond_dim=12, n_layers=1,
                      n_heads=2, mlp_hidden=24, enc_hidden=24, dec_hidden=24)
    return DynamicsCore(cfg, init_params(cfg, seed=0), NormStats.from_episodes(episodes))


class TestTrajErr:
    def test_identical_zero(self, episodes):
        states = episodes[0].states[:10]
        assert traj_err(states, states) == pytest.approx(0.0, abs=1e-10)

    def test_quaternion_sign_flip_zero(self, episodes):
        states = [s.copy() for s in episodes[0].states[:5]]
        flipped = [s.copy() for s in states]
        for s in flipped:
            s.object_quaternions = -s.object_quaternions
        assert traj_err(flipped, states) == pytest.approx(0.0, abs=1e-9)

    def test_shares_state_loss_implementation(self, episodes):
        """TrajErr over a length-1 trajectory equals state_loss exactly."""
        a, b = episodes[0].states[0], episodes[1].states[3]
        assert traj_err([a], [b]) == state_loss(a, b).item()

    def test_length_mismatch(self, episodes):
        with pytest.raises(ValueError):
            traj_err(episodes[0].states[:3], episodes[0].states[:4])


class TestEvalReport:
    def test_aggregate_recomputable_from_rows(self):
        rng = np.random.default_rng(0)
        report = EvalReport()
        for i in range(10):
            report.add(episode=i, traj_err=float(rng.uniform()), psnr=float(rng.uniform(10, 30)))
        agg = report.aggregate()
        manual = np.mean([r["traj_err"] for r in report.rows])
        assert agg["traj_err_mean"] == pytest.approx(manual, abs=1e-12)
        assert "psnr_std" in agg

    def test_csv_and_summary(self):
        report = EvalReport()
        report.add(episode=0, mode="gt_first", traj_err=0.5, psnr=20.0)
        csv = report.to_csv()
        assert csv.splitlines()[0] == "episode,mode,traj_err,psnr"
        assert "aggregate" in report.summary_json()


class TestRolloutModes:
    def test_unknown_mode_rejected(self, core, episodes):
        with pytest.raises(ValueError):
            eval_rollout_modes(core, episodes[0], "imagined")

    def test_gt_state_zero_trajerr(self, core, episodes):
        row = eval_rollout_modes(core, episodes[0], "gt_state", horizon=20)
        assert row["traj_err"] == 0.0
        assert row["psnr"] == math.inf  # deterministic renderer on true states

    def test_gt_first_produces_finite_row(self, core, episodes):
        row = eval_rollout_modes(core, episodes[0], "gt_first", horizon=15)
        assert math.isfinite(row["traj_err"]) and row["traj_err"] > 0
        assert row["psnr"] > 0

    def test_recon_modes_require_stainf(self, core, episodes):
        with pytest.raises(ValueError):
            eval_rollout_modes(core, episodes[0], "recon_first", horizon=10)
        with pytest.raises(ValueError):
            eval_rollout_modes(core, episodes[0], "recon_all", horizon=10)

    def test_four_modes_give_four_rows(self, core, episodes):
        """All modes produce rows (with a quick stainf for the recon modes)."""
        from gradworld.real2sim import stainf_train
        from gradworld.renderer import CameraConfig
        cam = CameraConfig(height=32, width=32)
        stainf, _ = stainf_train(episodes, camera=cam, epochs=10, batch_size=16,
                                 frame_stride=20, seed=0)
        rows = [eval_rollout_modes(core, episodes[0], m, stainf=stainf, camera=cam,
                                   horizon=12, frame_stride=6)
                for m in EVAL_MODES]
        assert [r["mode"] for r in rows] == list(EVAL_MODES)

    def test_noise_flag_changes_rollout(self, core, episodes):
        clean = eval_rollout_modes(core, episodes[0], "gt_first", horizon=10)
        noisy = eval_rollout_modes(core, episodes[0], "gt_first", horizon=10, noise_std=0.3)
        assert noisy["traj_err"] != clean["traj_err"]

    def test_eval_episodes_batch(self, core, episodes):
        report = eval_episodes(core, episodes[:2], modes=("gt_first",), horizon=10)
        assert len(report.rows) == 2


class TestOOD:
    def test_object_count_rows(self, core):
        report = ood_eval(core, "object_count", n_episodes=2, horizon=10)
        assert len(report.rows) == 4
        splits = {r["split"] for r in report.rows}
        assert splits == {"id", "ood"}
        assert all(math.isfinite(r["traj_err"]) for r in report.rows)

    def test_physical_parameter_rows(self, core):
        report = ood_eval(core, "physical_parameter", n_episodes=2, horizon=10)
        assert len(report.rows) == 4

    def test_unknown_kind(self, core):
        with pytest.raises(ValueError):
            ood_eval(core, "weather")


class TestScalingProbe:
    def test_probe_reports_linear_fit(self, core):
        out = scaling_probe(core, object_counts=(2, 4, 8), steps=5)
        assert len(out["rows"]) == 3
        floats = [r["tape_floats"] for r in out["rows"]]
        assert floats[0] < floats[1] < floats[2]
        assert 0.0 <= out["linear_fit_r2"] <= 1.0
