"""Two-stage dynamics training: teacher forcing, then autoregressive
fine-tuning with a cosine-annealed probability of feeding the model its own
predictions. AdamW with cosine-decayed learning rate; deterministic in the
seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..representation import Episode, NormStats, PhysicalState, state_loss_features
from .model import DynamicsCore, ModelConfig, init_params


@dataclass
class TrainConfig:
    stage1_epochs: int = 12
    stage2_epochs: int = 8
    window: int = 16               # rollout horizon per training sample
    batch_size: int = 64
    batches_per_epoch: int = 60
    lr_max: float = 2e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-5
    w_tra: float = 1.0
    w_enc: float = 1.0
    w_dec: float = 1.0
    smooth_l1_beta: float = 1.0
    grad_clip: float = 10.0
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


def ar_ratio_schedule(epoch: int, total_epochs: int) -> float:
    """Cosine anneal of the autoregressive-input probability from 0 to 1."""
    if total_epochs <= 1:
        return 1.0
    frac = epoch / (total_epochs - 1)
    return 0.5 * (1.0 - math.cos(math.pi * min(max(frac, 0.0), 1.0)))


@dataclass
class RolloutTrace:
    """Per-step record of one rollout window. ``x_hat`` entries are
    (robot_feat, obj_feat) tuples in normalized space; ``x_gt`` likewise when
    ground truth is available."""

    h: list = field(default_factory=list)
    e: list = field(default_factory=list)
    z_post: list = field(default_factory=list)
    z_hat: list = field(default_factory=list)
    x_hat: list = field(default_factory=list)
    x_gt: list = field(default_factory=list)


def compute_losses(trace: RolloutTrace, w_tra=1.0, w_enc=1.0, w_dec=1.0, beta=1.0):
    """Latent alignment, encoding consistency, and state reconstruction terms.

    Both latent losses are mean squared differences against a
    gradient-stopped target, summed over the trace.
    """
    if not trace.x_gt or len(trace.x_gt) != len(trace.z_hat):
        raise ValueError("trace lacks ground-truth alignment for loss computation")
    l_tra = l_enc = l_dec = None
    for z_hat, z_post, (xr_hat, xo_hat), (xr_gt, xo_gt) in zip(
            trace.z_hat, trace.z_post, trace.x_hat, trace.x_gt):
        t1 = ad.mean(ad.squared_error(z_hat, ad.stop_gradient(z_post)))
        t2 = ad.mean(ad.squared_error(z_post, ad.stop_gradient(z_hat)))
        t3 = state_loss_features(xr_hat, xr_gt, xo_hat, xo_gt, beta=beta)
        l_tra = t1 if l_tra is None else ad.add(l_tra, t1)
        l_enc = t2 if l_enc is None else ad.add(l_enc, t2)
        l_dec = t3 if l_dec is None else ad.add(l_dec, t3)
    total = ad.add(ad.add(ad.mul(l_tra, w_tra), ad.mul(l_enc, w_enc)), ad.mul(l_dec, w_dec))
    return l_tra, l_enc, l_dec, total


def episode_arrays(ep: Episode, stats: NormStats) -> dict:
    """Pre-normalized numpy views of one episode for fast window slicing."""
    robot = ep.robot_feature_array()
    out = {
        "robot": None if robot is None else stats.norm_robot(robot).values,
        "obj": stats.norm_object(ep.object_feature_array()).values,
        "act": stats.norm_action(ep.actions).values if ep.actions.shape[1] else ep.actions,
        "attrs_n": stats.norm_attr(ep.descriptors.object_attrs).values,
        "world_n": stats.norm_world(ep.descriptors.world).values,
    }
    return out


def _gather_windows(arrays: list, picks, window: int):
    """Stack (episode, t0) picks into batched (B, W+1, ...) arrays."""
    robots, objs, acts, attrs, worlds = [], [], [], [], []
    for ep_i, t0 in picks:
        a = arrays[ep_i]
        sl = slice(t0, t0 + window + 1)
        if a["robot"] is not None:
            robots.append(a["robot"][sl])
        objs.append(a["obj"][sl])
        acts.append(a["act"][sl])
        attrs.append(a["attrs_n"])
        worlds.append(a["world_n"])
    return (
        np.stack(robots) if robots else None,
        np.stack(objs),
        np.stack(acts),
        np.stack(attrs),
        np.stack(worlds)[0],  # world vector shared across the dataset
    )


def rollout_window(core: DynamicsCore, robot_w, obj_w, act_w, obj_cond, world_n,
                   ar_mask=None, rng: np.random.Generator | None = None):
    """Run a training window; returns a RolloutTrace.

    robot_w (B, W+1, 15) or None, obj_w (B, W+1, N, 10), act_w (B, W+1, A).
    ``ar_mask`` is the per-(step, element) probability of feeding the model
    its own prediction instead of ground truth (teacher forcing when 0/None).
    """
    B, steps_plus, n_obj = obj_w.shape[0], obj_w.shape[1], obj_w.shape[2]
    W = steps_plus - 1
    has_robot = robot_w is not None
    tokens = n_obj + (1 if has_robot else 0)
    h = core.zero_hidden(B, tokens)
    x_r = robot_w[:, 0] if has_robot else None
    x_o = obj_w[:, 0]
    z_in = None
    trace = RolloutTrace()
    for t in range(1, W + 1):
        rc = None
        if has_robot and act_w.shape[2] > 0:
            a_n = act_w[:, t - 1]
            rc = core.robot_condition(a_n, world_n)
            rc = ad.reshape(rc, (B, 1, rc.shape[-1]))
        h, e, z_hat, (xr_hat, xo_hat), _ = core.step_tokens(h, x_r, x_o, rc, obj_cond, z_prev=z_in)
        gt_r = robot_w[:, t] if has_robot else None
        gt_o = obj_w[:, t]
        z_post = core.encode(h, gt_r, gt_o)
        trace.h.append(h)
        trace.e.append(e)
        trace.z_hat.append(z_hat)
        trace.z_post.append(z_post)
        trace.x_hat.append((xr_hat, xo_hat))
        trace.x_gt.append((gt_r, gt_o))
        if t == W:
            break
        if ar_mask is None or ar_mask == 0.0:
            x_r, x_o = gt_r, gt_o
            z_in = z_post  # encoding of the ground-truth input; reused
        else:
            m = (rng.uniform(size=(B, 1)) < ar_mask).astype(np.float64)
            if has_robot:
                x_r = ad.add(ad.mul(xr_hat, m), ad.mul(gt_r, 1.0 - m))
            x_o = ad.add(ad.mul(xo_hat, m[:, :, None]), ad.mul(gt_o, 1.0 - m[:, :, None]))
            z_in = None
    return trace


def train(episodes: list, train_cfg: TrainConfig | None = None,
          model_cfg: ModelConfig | None = None, stats: NormStats | None = None,
          log_fn=None):
    """Full two-stage training run; returns (core, history rows).

    History rows: dicts with epoch, stage, ar_ratio, L_tra, L_enc, L_dec, total.
    """
    if not episodes:
        raise ValueError("empty dataset")
    tc = train_cfg or TrainConfig()
    action_dim = episodes[0].actions.shape[1]
    mc = model_cfg or ModelConfig(action_dim=action_dim)
    if mc.action_dim != action_dim:
        raise ValueError(f"model action_dim {mc.action_dim} != dataset {action_dim}")
    stats = stats or NormStats.from_episodes(episodes)
    params = init_params(mc, seed=tc.seed)
    core = DynamicsCore(mc, params, stats)
    rng = np.random.default_rng(tc.seed)

    arrays = [episode_arrays(ep, stats) for ep in episodes]
    ep_lengths = [a["obj"].shape[0] for a in arrays]
    if min(ep_lengths) < tc.window + 1:
        raise ValueError(f"window {tc.window} too long for shortest episode {min(ep_lengths)}")

    opt_state = ad.init_adam_state(params)
    total_steps = (tc.stage1_epochs + tc.stage2_epochs) * tc.batches_per_epoch
    history = []
    step_i = 0

    def run_epoch(stage: int, ar_ratio: float):
        nonlocal step_i
        sums = np.zeros(4)
        for _ in range(tc.batches_per_epoch):
            picks = [
                (int(rng.integers(0, len(arrays))), 0)
                for _ in range(tc.batch_size)
            ]
            picks = [(i, int(rng.integers(0, ep_lengths[i] - tc.window))) for i, _ in picks]
            robot_w, obj_w, act_w, attrs_w, world_n = _gather_windows(arrays, picks, tc.window)
            with ad.Tape() as tape:
                leaves = tape.leaves(params)
                core_t = DynamicsCore(mc, leaves, stats)
                obj_cond = core_t.object_conditions(attrs_w, world_n)
                trace = rollout_window(core_t, robot_w, obj_w, act_w, obj_cond, world_n,
                                       ar_mask=ar_ratio if stage == 2 else None, rng=rng)
                l_tra, l_enc, l_dec, total = compute_losses(
                    trace, tc.w_tra, tc.w_enc, tc.w_dec, tc.smooth_l1_beta)
            if not np.isfinite(total.values):
                raise FloatingPointError(f"non-finite training loss at step {step_i}")
            grad_map = ad.backward(tape, total)
            grads = ad.grads_by_name(grad_map, leaves)
            ad.clip_global_norm(grads, tc.grad_clip)
            lr = ad.cosine_lr(step_i, total_steps, tc.lr_max, tc.lr_min)
            ad.adamw_step(params, grads, opt_state, lr=lr, weight_decay=tc.weight_decay)
            step_i += 1
            sums += [l_tra.item(), l_enc.item(), l_dec.item(), total.item()]
        return sums / tc.batches_per_epoch

    for epoch in range(tc.stage1_epochs):
        avg = run_epoch(1, 0.0)
        row = {"epoch": epoch, "stage": 1, "ar_ratio": 0.0,
               "L_tra": avg[0], "L_enc": avg[1], "L_dec": avg[2], "total": avg[3]}
        history.append(row)
        if log_fn:
            log_fn(row)
    for epoch in range(tc.stage2_epochs):
        ratio = ar_ratio_schedule(epoch, tc.stage2_epochs)
        avg = run_epoch(2, ratio)
        row = {"epoch": tc.stage1_epochs + epoch, "stage": 2, "ar_ratio": ratio,
               "L_tra": avg[0], "L_enc": avg[1], "L_dec": avg[2], "total": avg[3]}
        history.append(row)
        if log_fn:
            log_fn(row)
    return core, history


def history_to_csv(history: list) -> str:
    lines = ["epoch,stage,ar_ratio,L_tra,L_enc,L_dec,total"]
    for r in history:
        lines.append(f"{r['epoch']},{r['stage']},{r['ar_ratio']:.6f},"
                     f"{r['L_tra']:.8f},{r['L_enc']:.8f},{r['L_dec']:.8f},{r['total']:.8f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# inference-time rollout on raw states


def rollout_states(core: DynamicsCore, x0: PhysicalState, actions: np.ndarray,
                   descriptors, n_steps: int | None = None) -> list:
    """Autoregressive rollout from a raw initial state; returns predicted
    PhysicalState objects for steps 1..T (denormalized, detached)."""
    T = n_steps if n_steps is not None else (len(actions) if actions is not None else 0)
    has_robot = x0.has_robot
    n_obj = x0.n_objects
    tokens = n_obj + (1 if has_robot else 0)
    stats = core.stats

    robot_n = None
    if has_robot:
        robot_n = stats.norm_robot(x0.robot_features()[None, :]).values
    obj_n = stats.norm_object(x0.object_features()[None, :, :]).values
    attrs_n = stats.norm_attr(descriptors.object_attrs).values
    world_n = stats.norm_world(descriptors.world).values
    obj_cond = core.object_conditions(attrs_n, world_n)
    obj_cond = ad.reshape(obj_cond, (1,) + obj_cond.shape)

    h = core.zero_hidden(1, tokens)
    x_r, x_o = robot_n, obj_n
    out = []
    for t in range(T):
        rc = None
        if has_robot and actions is not None and actions.shape[1] > 0:
            a_n = stats.norm_action(actions[t][None, :]).values
            rc = core.robot_condition(a_n, world_n)
            rc = ad.reshape(rc, (1, 1, rc.shape[-1]))
        h, _, _, (xr_hat, xo_hat), _ = core.step_tokens(h, x_r, x_o, rc, obj_cond)
        if not np.all(np.isfinite(xo_hat.values)):
            raise FloatingPointError(f"non-finite rollout state at step {t + 1}")
        robot_raw = None
        if has_robot:
            robot_raw = stats.denorm_robot(xr_hat.values).values[0]
        obj_raw = stats.denorm_object(xo_hat.values).values[0]
        out.append(PhysicalState.from_features(robot_raw, obj_raw))
        x_r, x_o = xr_hat, xo_hat
    return out


# ---------------------------------------------------------------------------
# checkpointing


def save_dynamics(path, core: DynamicsCore, train_cfg: TrainConfig | None = None) -> None:
    meta = {
        "kind": "dynamics",
        "model_config": core.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "norm_stats": core.stats.to_dict(),
    }
    ad.save_params(path, core.params, meta=meta)


def load_dynamics(path) -> DynamicsCore:
    params, meta = ad.load_params(path)
    if meta.get("kind") != "dynamics":
        raise ValueError(f"not a dynamics checkpoint: {path}")
    cfg = ModelConfig.from_dict(meta["model_config"])
    stats = NormStats.from_dict(meta["norm_stats"])
    return DynamicsCore(cfg, params, stats)
