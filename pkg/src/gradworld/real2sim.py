"""Real-to-sim system identification.

Two pieces:

* StaInf: a patch-encoder network that regresses visible quantities (robot
  pose, object positions, footprint sizes, colors, presence) from a single
  rendered frame. Object slots are canonicalized by color ordering, which is
  scene-constant and visible, so slot identity is well defined.
* PhyInf / direct SysID: gradient descent on masked scene-descriptor entries
  through the frozen learned dynamics, minimizing rollout-consistency loss
  against an observed state window (optionally a StaInf-inferred one).
  Parameters are clamped to declared bounds every step; multi-start keeps the
  best of several random initializations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dynamics import DynamicsCore
from .renderer import CameraConfig, Frame, effector_radius_px, render
from .representation import (
    Episode,
    PhysicalState,
    SceneDescriptors,
    state_loss_features,
)

ABSENT_SENTINEL = -999.0


def canonical_object_order(descriptors: SceneDescriptors) -> np.ndarray:
    """Scene-constant object permutation: lexicographic sort by color."""
    colors = descriptors.object_attrs[:, 5:8]
    return np.lexsort((colors[:, 2], colors[:, 1], colors[:, 0]))


# ---------------------------------------------------------------------------
# StaInf


@dataclass
class StaInfConfig:
    patch: int = 8
    embed_dim: int = 64
    trunk_hidden: int = 128
    n_slots: int = 2
    height: int = 64
    width: int = 64
    presence_weight: float = 1.0
    empty_frame_prob: float = 0.25

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d):
        return StaInfConfig(**d)


SLOT_OUT = 8   # presence, x, y, hx, hy, r, g, b
ROBOT_OUT = 5  # x, y, z, cos, sin


def init_stainf_params(cfg: StaInfConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    patch_dim = cfg.patch * cfg.patch * 3
    n_patches = (cfg.height // cfg.patch) * (cfg.width // cfg.patch)

    def lin(fi, fo, scale=1.0):
        return rng.standard_normal((fi, fo)) * (scale / np.sqrt(fi))

    p = {
        "patch.w": lin(patch_dim, cfg.embed_dim),
        "patch.b": np.zeros(cfg.embed_dim),
        "pos_embed": rng.standard_normal((n_patches, cfg.embed_dim)) * 0.1,
        "trunk.w1": lin(n_patches * cfg.embed_dim, cfg.trunk_hidden),
        "trunk.b1": np.zeros(cfg.trunk_hidden),
        "trunk.w2": lin(cfg.trunk_hidden, cfg.trunk_hidden),
        "trunk.b2": np.zeros(cfg.trunk_hidden),
        "robot.w": lin(cfg.trunk_hidden, ROBOT_OUT, scale=0.1),
        "robot.b": np.zeros(ROBOT_OUT),
        "slots.w": lin(cfg.trunk_hidden, cfg.n_slots * SLOT_OUT, scale=0.1),
        "slots.b": np.zeros(cfg.n_slots * SLOT_OUT),
    }
    return p


def frames_to_patches(frames: np.ndarray, cfg: StaInfConfig) -> np.ndarray:
    """(B, H, W, 3) -> (B, n_patches, patch*patch*3); pure numpy preprocessing."""
    B, H, W, _ = frames.shape
    p = cfg.patch
    x = frames.reshape(B, H // p, p, W // p, p, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // p) * (W // p), p * p * 3)


def stainf_forward(params: dict, patches) -> tuple:
    """Returns (robot_out (B, 5), slot_out (B, n_slots, SLOT_OUT)).

    Patch embeddings (plus learned positional offsets) are flattened rather
    than pooled; regression targets are spatial, so patch identity matters.
    """
    x = ad.linear(ad.as_tensor(patches), params["patch.w"], params["patch.b"])
    x = ad.tanh(ad.add(x, params["pos_embed"]))
    flat = ad.reshape(x, (x.shape[0], x.shape[1] * x.shape[2]))
    t = ad.tanh(ad.linear(flat, params["trunk.w1"], params["trunk.b1"]))
    t = ad.tanh(ad.linear(t, params["trunk.w2"], params["trunk.b2"]))
    robot = ad.linear(t, params["robot.w"], params["robot.b"])
    slots = ad.linear(t, params["slots.w"], params["slots.b"])
    B = ad.as_tensor(patches).shape[0]
    n_slots = slots.shape[-1] // SLOT_OUT
    return robot, ad.reshape(slots, (B, n_slots, SLOT_OUT))


def _abs_t(x):
    return ad.add(ad.relu(x), ad.relu(ad.neg(x)))


def _bce_with_logits(logits, targets):
    """Stable binary cross-entropy on raw logits."""
    l, y = ad.as_tensor(logits), ad.as_tensor(targets)
    neg_abs = ad.neg(_abs_t(l))
    return ad.add(ad.sub(ad.relu(l), ad.mul(l, y)),
                  ad.log(ad.add(ad.exp(neg_abs), 1.0)))


@dataclass
class StaInfModel:
    cfg: StaInfConfig
    params: dict
    camera: CameraConfig

    def infer(self, frame: Frame) -> dict:
        """Single-frame inference. Slots below the presence threshold report
        the absent sentinel in every field."""
        patches = frames_to_patches(frame.rgb[None], self.cfg)
        robot, slots = stainf_forward(self.params, patches)
        r = robot.values[0]
        heading = r[3:5] / max(np.linalg.norm(r[3:5]), 1e-9)
        out = {
            "robot": {
                "position": np.array([r[0], r[1], r[2]]),
                "heading": heading,
            },
            "objects": [],
        }
        for s in slots.values[0]:
            present = 1.0 / (1.0 + math.exp(-s[0])) > 0.5
            if present:
                out["objects"].append({
                    "present": True,
                    "position": s[1:3].copy(),
                    "half_size": s[3:5].copy(),
                    "color": s[5:8].copy(),
                })
            else:
                out["objects"].append({
                    "present": False,
                    "position": np.full(2, ABSENT_SENTINEL),
                    "half_size": np.full(2, ABSENT_SENTINEL),
                    "color": np.full(3, ABSENT_SENTINEL),
                })
        return out


def _stainf_targets(state: PhysicalState, descriptors: SceneDescriptors, n_slots: int):
    """Canonically ordered supervision arrays for one frame."""
    perm = canonical_object_order(descriptors)
    n = min(len(perm), n_slots)
    slot_t = np.zeros((n_slots, SLOT_OUT))
    for k in range(n):
        i = perm[k]
        slot_t[k, 0] = 1.0
        slot_t[k, 1:3] = state.object_positions[i, :2]
        slot_t[k, 3:5] = descriptors.object_attrs[i, 0:2]
        slot_t[k, 5:8] = descriptors.object_attrs[i, 5:8]
    R = state.robot_rotation.reshape(3, 3)
    robot_t = np.array([
        state.robot_position[0], state.robot_position[1], state.robot_position[2],
        R[0, 0], R[1, 0],
    ])
    return robot_t, slot_t


def stainf_train(episodes: list, camera: CameraConfig | None = None,
                 cfg: StaInfConfig | None = None, epochs: int = 30,
                 batch_size: int = 32, lr: float = 2e-3, frame_stride: int = 5,
                 seed: int = 0, log_fn=None) -> tuple:
    """Supervised single-frame regression on renderer output paired with
    oracle states. Returns (StaInfModel, history). Smooth-L1 on positions and
    sizes, MAE on colors, angular distance on the robot heading."""
    cam = camera or CameraConfig()
    cfg = cfg or StaInfConfig(height=cam.height, width=cam.width)
    rng = np.random.default_rng(seed)

    frames, robot_ts, slot_ts = [], [], []
    for ep in episodes:
        if not ep.states[0].has_robot:
            raise ValueError("StaInf training expects robot scenes paired with frames")
        for t in range(0, len(ep.states), frame_stride):
            frames.append(render(ep.states[t], ep.descriptors, cam).rgb)
            r_t, s_t = _stainf_targets(ep.states[t], ep.descriptors, cfg.n_slots)
            robot_ts.append(r_t)
            slot_ts.append(s_t)
    frames = np.stack(frames)
    robot_ts = np.stack(robot_ts)
    slot_ts = np.stack(slot_ts)
    patches_all = frames_to_patches(frames, cfg)
    empty_frame = render(
        PhysicalState(None, None, None, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4))),
        SceneDescriptors(np.zeros((0, 8)), episodes[0].descriptors.world), cam).rgb
    empty_patches = frames_to_patches(empty_frame[None], cfg)[0]

    params = init_stainf_params(cfg, seed=seed)
    opt = ad.init_adam_state(params)
    n = frames.shape[0]
    steps_per_epoch = max(1, n // batch_size)
    history = []
    step = 0
    total_steps = epochs * steps_per_epoch
    for epoch in range(epochs):
        order = rng.permutation(n)
        ep_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * batch_size:(b + 1) * batch_size]
            pb = patches_all[idx].copy()
            rb = robot_ts[idx].copy()
            sb = slot_ts[idx].copy()
            live = np.ones((idx.shape[0], 1))
            empties = rng.uniform(size=idx.shape[0]) < cfg.empty_frame_prob
            if empties.any():
                pb[empties] = empty_patches
                sb[empties] = 0.0
                live[empties] = 0.0
            with ad.Tape() as tape:
                leaves = tape.leaves(params)
                robot, slots = stainf_forward(leaves, pb)
                pres_logit = ad.slice_(slots, (..., slice(0, 1)))
                l_pres = ad.mean(_bce_with_logits(pres_logit, sb[..., 0:1]))
                mask3 = live[:, :, None]
                l_pos = ad.mean(ad.mul(ad.smooth_l1(ad.slice_(slots, (..., slice(1, 3))), sb[..., 1:3], 0.05), mask3))
                l_size = ad.mean(ad.mul(ad.smooth_l1(ad.slice_(slots, (..., slice(3, 5))), sb[..., 3:5], 0.05), mask3))
                l_color = ad.mean(ad.mul(_abs_t(ad.sub(ad.slice_(slots, (..., slice(5, 8))), sb[..., 5:8])), mask3))
                l_rpos = ad.mean(ad.mul(ad.smooth_l1(ad.slice_(robot, (..., slice(0, 3))), rb[:, 0:3], 0.05), live))
                head = ad.slice_(robot, (..., slice(3, 5)))
                hn = ad.div(head, ad.sqrt(ad.add(ad.sum_(ad.mul(head, head), axes=-1, keepdims=True), 1e-12)))
                dot = ad.sum_(ad.mul(hn, rb[:, 3:5]), axes=-1, keepdims=True)
                l_head = ad.mean(ad.mul(ad.acos(ad.clamp(dot, -1.0 + 1e-7, 1.0 - 1e-7)), live))
                loss = ad.add(ad.add(ad.add(l_pos, l_size), ad.add(l_color, ad.mul(l_pres, cfg.presence_weight))),
                              ad.add(l_rpos, l_head))
            grads = ad.grads_by_name(ad.backward(tape, loss), leaves)
            ad.clip_global_norm(grads, 10.0)
            ad.adamw_step(params, grads, opt, lr=ad.cosine_lr(step, total_steps, lr, lr * 0.01))
            step += 1
            ep_loss += loss.item()
        row = {"epoch": epoch, "loss": ep_loss / steps_per_epoch}
        history.append(row)
        if log_fn:
            log_fn(row)
    return StaInfModel(cfg, params, cam), history


def save_stainf(path, model: StaInfModel) -> None:
    meta = {"kind": "stainf", "config": model.cfg.to_dict(),
            "camera": {"height": model.camera.height, "width": model.camera.width,
                       "world_bounds": list(model.camera.world_bounds),
                       "background": list(model.camera.background),
                       "sigma_px": model.camera.sigma_px}}
    ad.save_params(path, model.params, meta=meta)


def load_stainf(path) -> StaInfModel:
    params, meta = ad.load_params(path)
    if meta.get("kind") != "stainf":
        raise ValueError(f"not a stainf checkpoint: {path}")
    cam = meta["camera"]
    camera = CameraConfig(height=cam["height"], width=cam["width"],
                          world_bounds=tuple(cam["world_bounds"]),
                          background=tuple(cam["background"]), sigma_px=cam["sigma_px"])
    return StaInfModel(StaInfConfig.from_dict(meta["config"]), params, camera)


def infer_initial_state(model: StaInfModel, frame: Frame, reference: PhysicalState,
                        descriptors: SceneDescriptors) -> PhysicalState:
    """Initial state for a rollout from one frame: inferred robot pose and
    object positions, zero velocities, identity quaternions. Object slots are
    matched back to descriptor order by color proximity; fields a top-down
    frame cannot carry (object z, exact effector z) fall back to geometry."""
    est = model.infer(frame)
    perm = canonical_object_order(descriptors)
    n = descriptors.n_objects
    pos = reference.object_positions.copy()
    for k, slot in enumerate(est["objects"][: len(perm)]):
        if not slot["present"]:
            continue
        i = perm[k]
        pos[i, 0:2] = slot["position"]
        pos[i, 2] = descriptors.object_attrs[i, 2]
    r = est["robot"]
    heading = r["heading"]
    theta = math.atan2(heading[1], heading[0])
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return PhysicalState(
        robot_position=np.array([r["position"][0], r["position"][1], r["position"][2]]),
        robot_velocity=np.zeros(3),
        robot_rotation=R.reshape(9),
        object_positions=pos,
        object_velocities=np.zeros_like(pos),
        object_quaternions=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
    )


def infer_trajectory(model: StaInfModel, frames: list, descriptors: SceneDescriptors,
                     reference0: PhysicalState, dt: float) -> list:
    """Per-frame StaInf states with velocities from position differences."""
    states = [infer_initial_state(model, f, reference0, descriptors) for f in frames]
    for t in range(1, len(states)):
        states[t].object_velocities = (states[t].object_positions - states[t - 1].object_positions) / dt
        states[t].robot_velocity = (states[t].robot_position - states[t - 1].robot_position) / dt
    return states


# ---------------------------------------------------------------------------
# PhyInf / direct parameter identification


@dataclass
class ParameterMask:
    """Which descriptor entries are unknown, with per-entry bounds."""

    attrs_mask: np.ndarray       # (N, 8) bool
    world_mask: np.ndarray       # (7,) bool
    attrs_lo: np.ndarray
    attrs_hi: np.ndarray
    world_lo: np.ndarray
    world_hi: np.ndarray

    @staticmethod
    def for_entries(n_objects: int, attr_entries: list | None = None,
                    world_entries: list | None = None,
                    lo: float = 0.0, hi: float = 1.0) -> "ParameterMask":
        """attr_entries: list of (object_index, attr_index, lo, hi)."""
        am = np.zeros((n_objects, 8), dtype=bool)
        wm = np.zeros(7, dtype=bool)
        alo = np.zeros((n_objects, 8))
        ahi = np.ones((n_objects, 8))
        wlo = np.zeros(7)
        whi = np.ones(7)
        for entry in attr_entries or []:
            i, j, l, h = entry
            am[i, j] = True
            alo[i, j], ahi[i, j] = l, h
        for entry in world_entries or []:
            j, l, h = entry
            wm[j] = True
            wlo[j], whi[j] = l, h
        return ParameterMask(am, wm, alo, ahi, wlo, whi)

    @property
    def n_params(self) -> int:
        return int(self.attrs_mask.sum() + self.world_mask.sum())

    def theta_bounds(self):
        lo = np.concatenate([self.attrs_lo[self.attrs_mask], self.world_lo[self.world_mask]])
        hi = np.concatenate([self.attrs_hi[self.attrs_mask], self.world_hi[self.world_mask]])
        return lo, hi

    def insert(self, theta, base_attrs: np.ndarray, base_world: np.ndarray):
        """Assemble full (attrs, world) Tensors with theta in masked slots.

        theta (k,) gives unbatched (N, 8)/(7,); theta (S, k) gives batched
        (S, N, 8)/(S, 7) candidates.
        """
        theta = ad.as_tensor(theta)
        batched = theta.ndim == 2
        attrs0 = base_attrs.copy()
        attrs0[self.attrs_mask] = 0.0
        world0 = base_world.copy()
        world0[self.world_mask] = 0.0
        attrs_t = ad.as_tensor(attrs0)
        world_t = ad.as_tensor(world0)
        k = 0
        for i, j in np.argwhere(self.attrs_mask):
            onehot = np.zeros_like(base_attrs)
            onehot[i, j] = 1.0
            th = ad.slice_(theta, (slice(None), slice(k, k + 1)) if batched else (slice(k, k + 1),))
            if batched:
                th = ad.reshape(th, (th.shape[0], 1, 1))
            attrs_t = ad.add(attrs_t, ad.mul(th, onehot))
            k += 1
        for (j,) in np.argwhere(self.world_mask):
            onehot = np.zeros_like(base_world)
            onehot[j] = 1.0
            th = ad.slice_(theta, (slice(None), slice(k, k + 1)) if batched else (slice(k, k + 1),))
            world_t = ad.add(world_t, ad.mul(th, onehot))
            k += 1
        if batched and attrs_t.ndim == 2:
            attrs_t = ad.broadcast_to(attrs_t, (theta.shape[0],) + attrs_t.shape)
        if batched and world_t.ndim == 1:
            world_t = ad.broadcast_to(world_t, (theta.shape[0],) + world_t.shape)
        return attrs_t, world_t

    def extract(self, descriptors: SceneDescriptors) -> np.ndarray:
        return np.concatenate([
            descriptors.object_attrs[self.attrs_mask],
            descriptors.world[self.world_mask],
        ])


@dataclass
class PhyInfProblem:
    core: DynamicsCore           # frozen dynamics
    mask: ParameterMask
    window: int = 64

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be at least 2")
        lo, hi = self.mask.theta_bounds()
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("masked parameters need finite bounds")


@dataclass
class SysIdResult:
    theta: np.ndarray
    descriptors: SceneDescriptors
    loss_curve: list
    init_theta: np.ndarray
    bound_hits: int
    stalled: bool
    all_final_losses: list

    def report(self) -> dict:
        return {
            "init": self.init_theta.tolist(),
            "final": self.theta.tolist(),
            "final_loss": self.loss_curve[-1] if self.loss_curve else None,
            "loss_curve": self.loss_curve,
            "bound_hits": self.bound_hits,
            "stalled": self.stalled,
            "all_final_losses": self.all_final_losses,
        }


def _window_loss(core: DynamicsCore, theta, mask: ParameterMask, base: SceneDescriptors,
                 robot_w, obj_w, act_w, n_starts: int):
    """Rollout-consistency loss for a batch of parameter candidates.

    theta (n_starts, k); the shared observation window is broadcast down the
    batch axis, so all starts run in a single batched rollout. Starts are
    independent, so optimizing the batch-mean loss optimizes each.
    """
    stats = core.stats
    S = n_starts
    W = obj_w.shape[0] - 1
    n_obj = obj_w.shape[1]
    has_robot = robot_w is not None
    tokens = n_obj + (1 if has_robot else 0)

    attrs_t, world_t = mask.insert(ad.as_tensor(theta), base.object_attrs, base.world)
    attrs_n = stats.norm_attr(attrs_t)
    world_n = stats.norm_world(world_t)          # (S, 7)
    obj_cond = core.object_conditions(attrs_n, world_n)  # (S, N, C)

    h = core.zero_hidden(S, tokens)
    x_r_t = None
    if has_robot:
        x_r_t = np.broadcast_to(stats.norm_robot(robot_w[0][None]).values, (S, 15)).copy()
    x_o_t = np.broadcast_to(stats.norm_object(obj_w[0][None]).values, (S, n_obj, 10)).copy()
    total = None
    for t in range(1, W + 1):
        rc = None
        if has_robot and act_w.shape[1] > 0:
            a_n = stats.norm_action(act_w[t - 1][None]).values
            a_n = np.broadcast_to(a_n, (S, a_n.shape[1])).copy()
            rc = ad.reshape(core.robot_condition(a_n, world_n), (S, 1, -1))
        h, _, _, (xr_hat, xo_hat), _ = core.step_tokens(h, x_r_t, x_o_t, rc, obj_cond)
        gt_r = None
        if has_robot:
            gt_r = np.broadcast_to(stats.norm_robot(robot_w[t][None]).values, (S, 15))
        gt_o = np.broadcast_to(stats.norm_object(obj_w[t][None]).values, (S, n_obj, 10))
        step_loss = state_loss_features(xr_hat, gt_r, xo_hat, gt_o)
        total = step_loss if total is None else ad.add(total, step_loss)
        x_r_t, x_o_t = xr_hat, xo_hat
    return total


def _eval_candidate(core, theta_row, mask, base, robot_w, obj_w, act_w) -> float:
    loss = _window_loss(core, theta_row[None], mask, base, robot_w, obj_w, act_w, 1)
    return float(loss.values)


def first_motion_step(episode: Episode, speed_eps: float = 1e-6) -> int:
    """First step at which any object moves; informative windows start here."""
    speeds = np.linalg.norm(episode.object_feature_array()[:, :, 3:6], axis=-1).max(axis=1)
    moving = np.nonzero(speeds > speed_eps)[0]
    return int(moving[0]) if moving.size else 0


def identify_parameters(core: DynamicsCore, episode: Episode, mask: ParameterMask,
                        window: int = 64, window_start: int = 0,
                        init: np.ndarray | None = None,
                        lr: float = 0.05, steps: int = 60, n_starts: int = 4,
                        seed: int = 0, log_fn=None) -> SysIdResult:
    """Gradient-descent system identification through the frozen dynamics.

    Minimizes the state loss between the observed window and rollouts under
    candidate descriptors, over the masked entries only. Deterministic in
    (init, seed).
    """
    if mask.n_params == 0:
        return SysIdResult(
            theta=np.zeros(0) if init is None else np.asarray(init),
            descriptors=episode.descriptors.copy(),
            loss_curve=[], init_theta=np.zeros(0) if init is None else np.asarray(init),
            bound_hits=0, stalled=False, all_final_losses=[])
    rng = np.random.default_rng(seed)
    lo, hi = mask.theta_bounds()
    t0 = max(0, min(window_start, len(episode.states) - 2))
    W = min(window, len(episode.states) - 1 - t0)
    sl = slice(t0, t0 + W + 1)
    robot_w = episode.robot_feature_array()
    robot_w = robot_w[sl] if robot_w is not None else None
    obj_w = episode.object_feature_array()[sl]
    act_w = episode.actions[sl]
    base = episode.descriptors

    thetas = rng.uniform(lo, hi, size=(n_starts, mask.n_params))
    if init is not None:
        thetas[0] = np.clip(np.asarray(init, dtype=np.float64), lo, hi)

    params = {"theta": thetas}
    opt = ad.init_adam_state(params)
    loss_curve = []
    bound_hits = 0
    stall_count = 0
    for it in range(steps):
        with ad.Tape() as tape:
            leaves = tape.leaves(params)
            loss = _window_loss(core, leaves["theta"], mask, base,
                                robot_w, obj_w, act_w, n_starts)
        if not np.isfinite(loss.values):
            raise FloatingPointError(f"non-finite sysid loss at step {it}")
        grads = ad.grads_by_name(ad.backward(tape, loss), leaves)
        gnorm = math.sqrt(float((grads["theta"] ** 2).sum()))
        if gnorm < 1e-12:
            stall_count += 1
        ad.clip_global_norm(grads, 10.0)
        ad.adamw_step(params, grads, opt, lr=lr)
        clipped = np.clip(params["theta"], lo, hi)
        bound_hits += int((clipped != params["theta"]).sum())
        params["theta"][...] = clipped
        loss_curve.append(float(loss.values) / n_starts)
        if log_fn:
            log_fn({"step": it, "loss": loss_curve[-1]})

    finals = [
        _eval_candidate(core, params["theta"][s], mask, base, robot_w, obj_w, act_w)
        for s in range(n_starts)
    ]
    best = int(np.argmin(finals))
    theta = params["theta"][best]
    attrs_t, world_t = mask.insert(ad.as_tensor(theta), base.object_attrs, base.world)
    out_desc = SceneDescriptors(attrs_t.values.copy(), world_t.values.copy())
    return SysIdResult(
        theta=theta.copy(),
        descriptors=out_desc,
        loss_curve=loss_curve,
        init_theta=thetas[0].copy(),
        bound_hits=bound_hits,
        stalled=stall_count >= max(3, steps // 4),
        all_final_losses=finals,
    )


def direct_sysid(core: DynamicsCore, episode: Episode, mask: ParameterMask,
                 **kwargs) -> SysIdResult:
    """Identification from directly measured states (no visual inference)."""
    return identify_parameters(core, episode, mask, **kwargs)


def phyinf_identify(problem: PhyInfProblem, observed: Episode, **kwargs) -> SysIdResult:
    """Identification over the problem's observation window; the observed
    episode may carry oracle states or StaInf-inferred ones."""
    kwargs.setdefault("window", problem.window)
    return identify_parameters(problem.core, observed, problem.mask, **kwargs)


def save_sysid_report(path, result: SysIdResult) -> None:
    Path(path).write_text(json.dumps(result.report(), indent=2))
