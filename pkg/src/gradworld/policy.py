"""Policy optimization through the learned dynamics.

Sparse terminal rewards over an episode trace: r1 rewards approaching the
first cube, r2 rewards driving the cubes together, r3 rewards pushing the
second cube toward the table border; each is a normalized distance
reduction. Reported values use hard minima over the trace; the gradient
path replaces the min with a temperature-controlled soft-min.

Two trainers under the same evaluation protocol and episode accounting:

* BPTT: the policy acts inside the learned model; the terminal reward
  surrogate is backpropagated through the whole differentiable rollout.
* REINFORCE: a score-function baseline that only ever interacts with the
  oracle environment, with Gaussian exploration noise and a moving-average
  reward baseline.

Evaluation always runs in the oracle, never the learned model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import DynamicsCore
from .oracle import PushTaskConfig, sample_scene, step, to_physical_state
from .representation import PhysicalState, SceneDescriptors

SUCCESS_DISPLACEMENT = 0.05  # meters the second cube must move


class DegenerateRewardError(ValueError):
    """An initial distance in a reward denominator is zero."""


@dataclass
class RewardSpec:
    border_x: float = 0.4        # table border the second cube is pushed toward
    tau: float = 0.01            # soft-min temperature (meters)
    horizon: int = 60


@dataclass
class PolicyConfig:
    hidden: tuple = (64, 64)
    action_dim: int = 3
    n_objects: int = 2
    v_max: float = 0.6
    sigma_explore: float = 0.15
    horizon: int = 60
    lr: float = 3e-3

    @property
    def input_dim(self) -> int:
        return 15 + 10 * self.n_objects

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["hidden"] = list(d["hidden"])
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return PolicyConfig(**d)


# ---------------------------------------------------------------------------
# rewards


def _traj_distances(robot_xy: np.ndarray, c1_xy: np.ndarray, c2_xy: np.ndarray,
                    spec: RewardSpec):
    d_rc1 = np.linalg.norm(robot_xy - c1_xy, axis=-1)
    d_c1c2 = np.linalg.norm(c1_xy - c2_xy, axis=-1)
    border_gap = spec.border_x - c2_xy[..., 0]
    return d_rc1, d_c1c2, border_gap


def terminal_rewards(robot_xy: np.ndarray, c1_xy: np.ndarray, c2_xy: np.ndarray,
                     spec: RewardSpec) -> dict:
    """Hard-min rewards from planar traces of shape (T+1, 2); minima over t>=1."""
    d_rc1, d_c1c2, border_gap = _traj_distances(robot_xy, c1_xy, c2_xy, spec)
    if d_rc1[0] <= 0.0 or d_c1c2[0] <= 0.0 or border_gap[0] <= 0.0:
        raise DegenerateRewardError(
            f"zero initial distance: d_rc1={d_rc1[0]}, d_c1c2={d_c1c2[0]}, "
            f"border_gap={border_gap[0]}")
    r1 = 1.0 - float(d_rc1[1:].min()) / float(d_rc1[0])
    r2 = 1.0 - float(d_c1c2[1:].min()) / float(d_c1c2[0])
    r3 = 1.0 - float(border_gap[-1]) / float(border_gap[0])
    return {"r1": r1, "r2": r2, "r3": r3, "total": r1 + r2 + r3}


def success(c2_positions: np.ndarray) -> bool:
    """Second cube moved more than the success displacement over the episode."""
    return bool(np.linalg.norm(c2_positions[-1] - c2_positions[0]) > SUCCESS_DISPLACEMENT)


def softmin(d_stack, tau: float):
    """Differentiable soft minimum over axis 0 of a (T, B) Tensor.

    softmin = m - tau * log sum exp(-(d - m)/tau) with a detached shift m,
    so softmin lies in [min - tau log T, min].
    """
    d_stack = ad.as_tensor(d_stack)
    m = d_stack.values.min(axis=0)
    z = ad.exp(ad.mul(ad.sub(d_stack, m), -1.0 / tau))
    return ad.add(ad.mul(ad.log(ad.sum_(z, axes=0)), -tau), m)


def _planar_distance(a, b):
    d = ad.sub(a, b)
    return ad.sqrt(ad.add(ad.sum_(ad.mul(d, d), axes=-1), 1e-12))


def reward_surrogate(robot_xy_steps: list, c1_xy_steps: list, c2_xy_steps: list,
                     spec: RewardSpec):
    """Soft-min total reward as a scalar Tensor (mean over the batch).

    Each list holds (B, 2) Tensors for t = 0..T; step 0 supplies the
    denominators and is excluded from the minima.
    """
    T = len(robot_xy_steps) - 1
    if T < 1:
        raise ValueError("need at least one step beyond the initial state")
    d_rc1 = [_planar_distance(r, c1) for r, c1 in zip(robot_xy_steps, c1_xy_steps)]
    d_c1c2 = [_planar_distance(c1, c2) for c1, c2 in zip(c1_xy_steps, c2_xy_steps)]
    d_rc1_0, d_c1c2_0 = d_rc1[0].values, d_c1c2[0].values
    gap_0 = spec.border_x - c2_xy_steps[0].values[..., 0]
    if np.any(d_rc1_0 <= 0) or np.any(d_c1c2_0 <= 0) or np.any(gap_0 <= 0):
        raise DegenerateRewardError("zero initial distance in reward surrogate")

    stack = lambda ds: ad.concat([ad.reshape(d, (1,) + d.shape) for d in ds], axis=0)
    min_rc1 = softmin(stack(d_rc1[1:]), spec.tau)
    min_c1c2 = softmin(stack(d_c1c2[1:]), spec.tau)
    r1 = ad.sub(1.0, ad.div(min_rc1, d_rc1_0))
    r2 = ad.sub(1.0, ad.div(min_c1c2, d_c1c2_0))
    gap_T = ad.sub(spec.border_x, ad.slice_(c2_xy_steps[-1], (..., 0)))
    r3 = ad.sub(1.0, ad.div(gap_T, gap_0))
    return ad.mean(ad.add(ad.add(r1, r2), r3))


# ---------------------------------------------------------------------------
# policy network


def init_policy_params(cfg: PolicyConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    dims = [cfg.input_dim, *cfg.hidden, cfg.action_dim]
    p = {}
    for i, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
        scale = 0.1 if i == len(dims) - 2 else 1.0
        p[f"pi.w{i}"] = rng.standard_normal((fi, fo)) * (scale / np.sqrt(fi))
        p[f"pi.b{i}"] = np.zeros(fo)
    return p


def policy_forward(params: dict, feats_n, cfg: PolicyConfig):
    """Normalized state features (B, D) -> bounded raw actions (B, A).

    Planar velocity components are tanh-squashed to [-v_max, v_max]; the
    press channel is squashed to (0, 1).
    """
    x = ad.as_tensor(feats_n)
    n_layers = len(cfg.hidden) + 1
    for i in range(n_layers):
        x = ad.linear(x, params[f"pi.w{i}"], params[f"pi.b{i}"])
        if i < n_layers - 1:
            x = ad.tanh(x)
    v = ad.mul(ad.tanh(ad.slice_(x, (..., slice(0, 2)))), cfg.v_max)
    press = ad.mul(ad.add(ad.tanh(ad.slice_(x, (..., slice(2, 3)))), 1.0), 0.5)
    parts = [v, press]
    if cfg.action_dim > 3:
        parts.append(ad.tanh(ad.slice_(x, (..., slice(3, None)))))
    return ad.concat(parts, axis=-1)


def state_feats_normalized(stats, state: PhysicalState) -> np.ndarray:
    rf = stats.norm_robot(state.robot_features()[None]).values
    of = stats.norm_object(state.object_features()[None]).values
    return np.concatenate([rf, of.reshape(1, -1)], axis=-1)


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    robot: object
    objects: list
    descriptors: SceneDescriptors
    x0: PhysicalState
    world: object


def make_scene_pool(n: int, cfg: PushTaskConfig, seed: int) -> list:
    pool = []
    rng = np.random.default_rng(seed)
    for _ in range(n):
        robot, objects, descriptors = sample_scene(rng, cfg)
        pool.append(Scene(robot=robot, objects=objects, descriptors=descriptors,
                          x0=to_physical_state(robot, objects), world=cfg.world()))
    return pool


# ---------------------------------------------------------------------------
# differentiable model rollout with a policy in the loop


def _denorm_pos_xy(feat_slice, mean, std):
    """Recover raw planar position from a normalized feature slice (B, 2)."""
    return ad.add(ad.mul(feat_slice, std[:2]), mean[:2])


def policy_model_rollout(core: DynamicsCore, pi_params: dict, cfg: PolicyConfig,
                         scenes: list, spec: RewardSpec, T: int):
    """Batched differentiable rollout a_t = pi(x_t) inside the learned model.

    Returns (J_surrogate Tensor, position traces as numpy (T+1, B, 2) triple).
    """
    stats = core.stats
    B = len(scenes)
    robot0 = np.concatenate([stats.norm_robot(s.x0.robot_features()[None]).values for s in scenes])
    obj0 = np.concatenate([stats.norm_object(s.x0.object_features()[None]).values for s in scenes])
    attrs_n = np.stack([stats.norm_attr(s.descriptors.object_attrs).values for s in scenes])
    world_n = stats.norm_world(scenes[0].descriptors.world).values
    obj_cond = core.object_conditions(attrs_n, world_n)

    rp_mean, rp_std = stats.robot_pos
    op_mean, op_std = stats.obj_pos

    def positions(robot_feat, obj_feat):
        r_xy = _denorm_pos_xy(ad.slice_(robot_feat, (..., slice(0, 2))), rp_mean, rp_std)
        c1_xy = _denorm_pos_xy(ad.slice_(obj_feat, (slice(None), 0, slice(0, 2))), op_mean, op_std)
        c2_xy = _denorm_pos_xy(ad.slice_(obj_feat, (slice(None), 1, slice(0, 2))), op_mean, op_std)
        return r_xy, c1_xy, c2_xy

    h = core.zero_hidden(B, 1 + cfg.n_objects)
    x_r, x_o = ad.as_tensor(robot0), ad.as_tensor(obj0)
    r_steps, c1_steps, c2_steps = [], [], []
    r0, c10, c20 = positions(x_r, x_o)
    r_steps.append(r0); c1_steps.append(c10); c2_steps.append(c20)
    for t in range(T):
        feats = ad.concat([x_r, ad.reshape(x_o, (B, 10 * cfg.n_objects))], axis=-1)
        action = policy_forward(pi_params, feats, cfg)
        a_n = stats.norm_action(action)
        rc = ad.reshape(core.robot_condition(a_n, world_n), (B, 1, -1))
        h, _, _, (x_r, x_o), _ = core.step_tokens(h, x_r, x_o, rc, obj_cond)
        rt, c1t, c2t = positions(x_r, x_o)
        r_steps.append(rt); c1_steps.append(c1t); c2_steps.append(c2t)
    J = reward_surrogate(r_steps, c1_steps, c2_steps, spec)
    traces = tuple(np.stack([s.values for s in steps]) for steps in (r_steps, c1_steps, c2_steps))
    return J, traces


def analytic_policy_grad(core: DynamicsCore, pi_params: dict, cfg: PolicyConfig,
                         scenes: list, spec: RewardSpec, T: int,
                         clip_norm: float = 10.0):
    """Gradient of the terminal soft reward w.r.t. policy parameters via one
    differentiable rollout; global-norm clipped. Returns (grads, J value)."""
    with ad.Tape() as tape:
        leaves = tape.leaves(pi_params)
        J, _ = policy_model_rollout(core, leaves, cfg, scenes, spec, T)
    if not np.isfinite(J.values):
        raise FloatingPointError("non-finite policy objective")
    grad_map = ad.backward(tape, J)
    grads = ad.grads_by_name(grad_map, leaves)
    for k in grads:
        if np.any(~np.isfinite(grads[k])):
            raise FloatingPointError(f"non-finite policy gradient in {k}")
    ad.clip_global_norm(grads, clip_norm)
    return grads, float(J.values)


# ---------------------------------------------------------------------------
# oracle-side evaluation (shared by both trainers)


def run_policy_in_oracle(pi_params: dict, cfg: PolicyConfig, stats, scene: Scene,
                         T: int, noise_rng=None, sigma: float = 0.0):
    """Closed-loop rollout in the oracle; returns (states, actions, noises)."""
    robot = scene.robot.copy()
    objects = [o.copy() for o in scene.objects]
    states = [to_physical_state(robot, objects)]
    actions, noises, feats_seq = [], [], []
    for _ in range(T):
        feats = state_feats_normalized(stats, states[-1])
        mu = policy_forward(pi_params, feats, cfg).values[0]
        eps = np.zeros_like(mu)
        if sigma > 0.0 and noise_rng is not None:
            eps = noise_rng.normal(0.0, sigma, size=mu.shape)
        a = mu + eps
        a[0] = np.clip(a[0], -cfg.v_max, cfg.v_max)
        a[1] = np.clip(a[1], -cfg.v_max, cfg.v_max)
        a[2] = np.clip(a[2], 0.0, 1.0)
        robot, objects = step(scene.world, robot, objects, a)
        states.append(to_physical_state(robot, objects))
        actions.append(a)
        noises.append(eps)
        feats_seq.append(feats)
    return states, actions, noises, feats_seq


def oracle_trace_rewards(states: list, spec: RewardSpec) -> dict:
    robot_xy = np.stack([s.robot_position[:2] for s in states])
    c1_xy = np.stack([s.object_positions[0, :2] for s in states])
    c2_xy = np.stack([s.object_positions[1, :2] for s in states])
    out = terminal_rewards(robot_xy, c1_xy, c2_xy, spec)
    c2_full = np.stack([s.object_positions[1] for s in states])
    out["success"] = success(c2_full)
    return out


def evaluate_policy(pi_params: dict, cfg: PolicyConfig, stats, scenes: list,
                    spec: RewardSpec, T: int) -> dict:
    rows = []
    for scene in scenes:
        states, _, _, _ = run_policy_in_oracle(pi_params, cfg, stats, scene, T)
        rows.append(oracle_trace_rewards(states, spec))
    agg = {k: float(np.mean([r[k] for r in rows])) for k in ("r1", "r2", "r3", "total")}
    agg["success_rate"] = float(np.mean([r["success"] for r in rows]))
    return agg


# ---------------------------------------------------------------------------
# trainers


def train_policy_bptt(core: DynamicsCore, cfg: PolicyConfig, push_cfg: PushTaskConfig,
                      episodes_budget: int = 320, batch: int = 8,
                      n_train_scenes: int = 16, n_eval_scenes: int = 32,
                      eval_every: int = 10, spec: RewardSpec | None = None,
                      seed: int = 0, log_fn=None):
    """Analytic-gradient policy training inside the learned model.

    Episode accounting: every batched model rollout consumes ``batch``
    episodes of budget. Returns (policy params, history rows).
    """
    spec = spec or RewardSpec(border_x=push_cfg.table_bounds[1], horizon=cfg.horizon)
    rng = np.random.default_rng(seed)
    train_pool = make_scene_pool(n_train_scenes, push_cfg, seed=seed + 1)
    eval_pool = make_scene_pool(n_eval_scenes, push_cfg, seed=seed + 2)
    pi = init_policy_params(cfg, seed=seed)
    opt = ad.init_adam_state(pi)
    history = []
    episodes_used = 0
    it = 0
    iters = max(1, episodes_budget // batch)
    while episodes_used < episodes_budget:
        scenes = [train_pool[int(rng.integers(0, len(train_pool)))] for _ in range(batch)]
        grads, J = analytic_policy_grad(core, pi, cfg, scenes, spec, cfg.horizon)
        for k in grads:
            grads[k] = -grads[k]  # ascend the reward
        lr = ad.cosine_lr(it, iters, cfg.lr, cfg.lr * 0.05)
        ad.adamw_step(pi, grads, opt, lr=lr)
        episodes_used += batch
        if it % eval_every == 0 or episodes_used >= episodes_budget:
            agg = evaluate_policy(pi, cfg, core.stats, eval_pool, spec, cfg.horizon)
            row = {"episode": episodes_used, "J_train": J, **agg}
            history.append(row)
            if log_fn:
                log_fn(row)
        it += 1
    return pi, history


def score_function_grads(pi_params: dict, cfg: PolicyConfig, feats_seq: list,
                         noises: list, sigma: float, advantage: float) -> dict:
    """REINFORCE gradient for one episode: advantage * sum_t d mu_t/d theta
    . eps_t / sigma^2, computed by taping the policy means against frozen
    noise."""
    with ad.Tape() as tape:
        leaves = tape.leaves(pi_params)
        surr = None
        for feats, eps in zip(feats_seq, noises):
            mu = policy_forward(leaves, feats, cfg)
            term = ad.sum_(ad.mul(mu, eps[None, :] / (sigma * sigma)))
            surr = term if surr is None else ad.add(surr, term)
        surr = ad.mul(surr, advantage)
    return ad.grads_by_name(ad.backward(tape, surr), leaves)


def train_policy_reinforce(core_stats, cfg: PolicyConfig, push_cfg: PushTaskConfig,
                           episodes_budget: int = 320, n_train_scenes: int = 16,
                           n_eval_scenes: int = 32, eval_every: int = 80,
                           spec: RewardSpec | None = None, seed: int = 0, log_fn=None):
    """Score-function baseline trained directly against the oracle with
    terminal-only rewards and a moving-average baseline."""
    if cfg.sigma_explore <= 0.0:
        raise ValueError("zero exploration noise makes the estimator degenerate")
    spec = spec or RewardSpec(border_x=push_cfg.table_bounds[1], horizon=cfg.horizon)
    rng = np.random.default_rng(seed)
    train_pool = make_scene_pool(n_train_scenes, push_cfg, seed=seed + 1)
    eval_pool = make_scene_pool(n_eval_scenes, push_cfg, seed=seed + 2)
    pi = init_policy_params(cfg, seed=seed)
    opt = ad.init_adam_state(pi)
    baseline = 0.0
    history = []
    for ep_i in range(episodes_budget):
        scene = train_pool[int(rng.integers(0, len(train_pool)))]
        states, actions, noises, feats_seq = run_policy_in_oracle(
            pi, cfg, core_stats, scene, cfg.horizon, noise_rng=rng, sigma=cfg.sigma_explore)
        R = oracle_trace_rewards(states, spec)["total"]
        advantage = R - baseline
        baseline = 0.9 * baseline + 0.1 * R
        grads = score_function_grads(pi, cfg, feats_seq, noises, cfg.sigma_explore, advantage)
        for k in grads:
            grads[k] = -grads[k]  # ascend
        ad.clip_global_norm(grads, 10.0)
        ad.adamw_step(pi, grads, opt, lr=cfg.lr)
        if (ep_i + 1) % eval_every == 0 or ep_i + 1 == episodes_budget:
            agg = evaluate_policy(pi, cfg, core_stats, eval_pool, spec, cfg.horizon)
            row = {"episode": ep_i + 1, "J_train": R, **agg}
            history.append(row)
            if log_fn:
                log_fn(row)
    return pi, history


def history_to_csv(history: list) -> str:
    lines = ["episode,r1,r2,r3,total,oracle_success"]
    for r in history:
        lines.append(f"{r['episode']},{r['r1']:.6f},{r['r2']:.6f},{r['r3']:.6f},"
                     f"{r['total']:.6f},{r['success_rate']:.6f}")
    return "\n".join(lines) + "\n"


def save_policy(path, pi_params: dict, cfg: PolicyConfig) -> None:
    ad.save_params(path, pi_params, meta={"kind": "policy", "config": cfg.to_dict()})


def load_policy(path):
    params, meta = ad.load_params(path)
    if meta.get("kind") != "policy":
        raise ValueError(f"not a policy checkpoint: {path}")
    return params, PolicyConfig.from_dict(meta["config"])
