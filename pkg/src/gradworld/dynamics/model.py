"""Object-centric recurrent dynamics core.

Per step: entity tokens are encoded from (hidden, state), coupled by a
transformer whose layers are modulated via adaptive layer normalization by
actions and static scene descriptors, passed through a shared gated
recurrent cell, and decoded back to explicit per-entity states:

    z = encode(h, x)
    e = couple(z, action, descriptors)   # global self-attention over entities
    h' = recur(h, e)
    z_hat = transition(h')
    x_hat = decode(z_hat)

Everything runs on the autodiff substrate, so rollouts are differentiable
w.r.t. parameters, actions, initial states, and scene descriptors.

Token axis layout: token 0 is the robot when the scene has one, objects
follow. Object tokens share all weights, which makes the core permutation
equivariant over objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..representation import (
    NormStats,
    OBJECT_ATTR_DIM,
    OBJECT_FEAT_DIM,
    ROBOT_FEAT_DIM,
    WORLD_DIM,
)


@dataclass
class ModelConfig:
    latent_dim: int = 64        # token width z / e
    hidden_dim: int = 128       # recurrent state per entity
    cond_dim: int = 64          # condition embedding width
    n_layers: int = 2           # coupling transformer blocks
    n_heads: int = 4
    mlp_hidden: int = 128
    enc_hidden: int = 128
    dec_hidden: int = 128
    action_dim: int = 3

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def _lin_init(rng, fan_in, fan_out, scale=1.0):
    return rng.standard_normal((fan_in, fan_out)) * (scale / np.sqrt(fan_in))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameter store. AdaLN scale/shift heads start at zero so every
    block begins as a plain layer norm; decoder heads start small so initial
    predictions sit near the normalized mean state."""
    rng = np.random.default_rng(seed)
    L, H, C, M = cfg.latent_dim, cfg.hidden_dim, cfg.cond_dim, cfg.mlp_hidden
    p = {}

    # encoder: per-type input projections + type embedding + shared trunk
    p["enc.in_robot.w"] = _lin_init(rng, ROBOT_FEAT_DIM, L)
    p["enc.in_robot.b"] = np.zeros(L)
    p["enc.in_obj.w"] = _lin_init(rng, OBJECT_FEAT_DIM, L)
    p["enc.in_obj.b"] = np.zeros(L)
    p["enc.type_embed"] = rng.standard_normal((2, L)) * 0.1
    p["enc.w1"] = _lin_init(rng, L + H, cfg.enc_hidden)
    p["enc.b1"] = np.zeros(cfg.enc_hidden)
    p["enc.w2"] = _lin_init(rng, cfg.enc_hidden, L)
    p["enc.b2"] = np.zeros(L)

    # condition embedders (robot: action+world, object: attrs+world)
    p["cond.robot.w1"] = _lin_init(rng, cfg.action_dim + WORLD_DIM, C)
    p["cond.robot.b1"] = np.zeros(C)
    p["cond.robot.w2"] = _lin_init(rng, C, C)
    p["cond.robot.b2"] = np.zeros(C)
    p["cond.obj.w1"] = _lin_init(rng, OBJECT_ATTR_DIM + WORLD_DIM, C)
    p["cond.obj.b1"] = np.zeros(C)
    p["cond.obj.w2"] = _lin_init(rng, C, C)
    p["cond.obj.b2"] = np.zeros(C)

    # coupling transformer blocks
    for l in range(cfg.n_layers):
        for which in ("adaln1", "adaln2"):
            p[f"cp.{l}.{which}.gamma_w"] = np.zeros((C, L))
            p[f"cp.{l}.{which}.gamma_b"] = np.zeros(L)
            p[f"cp.{l}.{which}.beta_w"] = np.zeros((C, L))
            p[f"cp.{l}.{which}.beta_b"] = np.zeros(L)
        for which in ("wq", "wk", "wv", "wo"):
            p[f"cp.{l}.attn.{which}"] = _lin_init(rng, L, L)
        p[f"cp.{l}.attn.bo"] = np.zeros(L)
        p[f"cp.{l}.mlp.w1"] = _lin_init(rng, L, M)
        p[f"cp.{l}.mlp.b1"] = np.zeros(M)
        p[f"cp.{l}.mlp.w2"] = _lin_init(rng, M, L)
        p[f"cp.{l}.mlp.b2"] = np.zeros(L)

    # shared gated recurrent cell over entities
    for gate in ("r", "u", "c"):
        p[f"rec.wx{gate}"] = _lin_init(rng, L, H)
        p[f"rec.wh{gate}"] = _lin_init(rng, H, H)
        p[f"rec.b{gate}"] = np.zeros(H)

    # transition: hidden -> predicted latent
    p["tra.w1"] = _lin_init(rng, H, cfg.enc_hidden)
    p["tra.b1"] = np.zeros(cfg.enc_hidden)
    p["tra.w2"] = _lin_init(rng, cfg.enc_hidden, L)
    p["tra.b2"] = np.zeros(L)

    # decoder: shared trunk + per-type heads
    p["dec.w1"] = _lin_init(rng, L, cfg.dec_hidden)
    p["dec.b1"] = np.zeros(cfg.dec_hidden)
    p["dec.robot.w"] = _lin_init(rng, cfg.dec_hidden, ROBOT_FEAT_DIM, scale=0.01)
    p["dec.robot.b"] = np.zeros(ROBOT_FEAT_DIM)
    p["dec.obj.w"] = _lin_init(rng, cfg.dec_hidden, OBJECT_FEAT_DIM, scale=0.01)
    p["dec.obj.b"] = np.zeros(OBJECT_FEAT_DIM)
    return p


# ---------------------------------------------------------------------------
# functional pieces (all take a dict of params whose values are Tensors or
# ndarrays; autodiff ops treat untracked inputs as constants)


def adaln(u, cond, gamma_w, gamma_b, beta_w, beta_b):
    """gamma(c) * LayerNorm(u) + beta(c); scale/shift are linear in the
    condition embedding and zero-initialized, so this starts as identity
    modulation around a plain layer norm."""
    u_t = ad.as_tensor(u)
    c_t = ad.as_tensor(cond)
    if c_t.shape[-1] != ad.as_tensor(gamma_w).shape[0]:
        raise ad.ShapeError(
            f"adaln: condition width {c_t.shape[-1]} does not match head {ad.as_tensor(gamma_w).shape[0]}")
    gamma = ad.add(ad.linear(c_t, gamma_w, gamma_b), 1.0)
    beta = ad.linear(c_t, beta_w, beta_b)
    return ad.add(ad.mul(gamma, ad.layer_norm(u_t)), beta)


def _mlp2(x, w1, b1, w2, b2, act=ad.tanh):
    return ad.linear(act(ad.linear(x, w1, b1)), w2, b2)


def _vec_normalize(v, eps=1e-12):
    n = ad.sqrt(ad.add(ad.sum_(ad.mul(v, v), axes=-1, keepdims=True), eps))
    return ad.div(v, n)


def _cross3(a, b):
    def comp(x, i):
        return ad.slice_(x, (..., slice(i, i + 1)))

    a0, a1, a2 = comp(a, 0), comp(a, 1), comp(a, 2)
    b0, b1, b2 = comp(b, 0), comp(b, 1), comp(b, 2)
    return ad.concat([
        ad.sub(ad.mul(a1, b2), ad.mul(a2, b1)),
        ad.sub(ad.mul(a2, b0), ad.mul(a0, b2)),
        ad.sub(ad.mul(a0, b1), ad.mul(a1, b0)),
    ], axis=-1)


def orthonormalize_rotation(flat9):
    """Project a raw (..., 9) block onto a rotation matrix, differentiably.

    Gram-Schmidt on the first two rows; the third row is their cross
    product, which guarantees det = +1.
    """
    r0 = ad.slice_(flat9, (..., slice(0, 3)))
    r1 = ad.slice_(flat9, (..., slice(3, 6)))
    u0 = _vec_normalize(r0)
    proj = ad.sum_(ad.mul(u0, r1), axes=-1, keepdims=True)
    u1 = _vec_normalize(ad.sub(r1, ad.mul(proj, u0)))
    u2 = _cross3(u0, u1)
    return ad.concat([u0, u1, u2], axis=-1)


class DynamicsCore:
    """Stateless functional wrapper: params dict + config + normalization stats.

    All tensor-level methods take/return NORMALIZED features with shapes
    (B, tokens, ...); ``has_robot`` picks the token layout.
    """

    def __init__(self, cfg: ModelConfig, params: dict, stats: NormStats):
        self.cfg = cfg
        self.params = params
        self.stats = stats

    # -- conditions ---------------------------------------------------------

    def object_conditions(self, attrs_n, world_n):
        """(N, attr) + world -> (N, cond_dim). Batched forms: attrs (B, N, attr)
        with world (7,) shared or (B, 7) per batch element."""
        p = self.params
        at = ad.as_tensor(attrs_n)
        batched = at.ndim == 3
        n = at.shape[-2]
        w = ad.as_tensor(world_n)
        target = (at.shape[0], n, w.shape[-1]) if batched else (n, w.shape[-1])
        if batched and w.ndim == 2:
            wq = ad.broadcast_to(ad.reshape(w, (w.shape[0], 1, w.shape[1])), target)
        else:
            wq = ad.broadcast_to(ad.reshape(w, (1,) * (len(target) - 1) + (w.shape[-1],)), target)
        x = ad.concat([at, wq], axis=-1)
        return _mlp2(x, p["cond.obj.w1"], p["cond.obj.b1"], p["cond.obj.w2"], p["cond.obj.b2"])

    def robot_condition(self, action_n, world_n):
        """(B, action) + (world,) -> (B, cond_dim)."""
        p = self.params
        a = ad.as_tensor(action_n)
        w = ad.as_tensor(world_n)
        if w.ndim == 1:
            w = ad.broadcast_to(ad.reshape(w, (1, w.shape[0])), (a.shape[0], w.shape[0]))
        x = ad.concat([a, w], axis=-1)
        return _mlp2(x, p["cond.robot.w1"], p["cond.robot.b1"], p["cond.robot.w2"], p["cond.robot.b2"])

    # -- RSSM pieces --------------------------------------------------------

    def encode(self, h, robot_feat_n, obj_feat_n):
        """f_enc: (hidden, state) -> latent tokens (B, T, latent)."""
        p = self.params
        parts = []
        if robot_feat_n is not None:
            r = ad.as_tensor(robot_feat_n)
            rt = ad.linear(ad.reshape(r, (r.shape[0], 1, r.shape[1])), p["enc.in_robot.w"], p["enc.in_robot.b"])
            parts.append(rt)
        o = ad.as_tensor(obj_feat_n)
        parts.append(ad.linear(o, p["enc.in_obj.w"], p["enc.in_obj.b"]))
        proj = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]

        n_obj = o.shape[1]
        te = ad.as_tensor(p["enc.type_embed"])
        rows = []
        if robot_feat_n is not None:
            rows.append(ad.slice_(te, (slice(0, 1), slice(None))))
        rows.append(ad.broadcast_to(ad.slice_(te, (slice(1, 2), slice(None))), (n_obj, te.shape[1])))
        embed = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        proj = ad.add(proj, embed)

        x = ad.concat([proj, ad.as_tensor(h)], axis=-1)
        return _mlp2(x, p["enc.w1"], p["enc.b1"], p["enc.w2"], p["enc.b2"])

    def couple(self, z, cond):
        """f_cp: transformer over entity tokens; each block is
        AdaLN -> self-attention -> residual -> AdaLN -> MLP -> residual."""
        p = self.params
        cfg = self.cfg
        x = ad.as_tensor(z)
        B, T, D = x.shape
        nh = cfg.n_heads
        dh = D // nh
        for l in range(cfg.n_layers):
            u = adaln(x, cond, p[f"cp.{l}.adaln1.gamma_w"], p[f"cp.{l}.adaln1.gamma_b"],
                      p[f"cp.{l}.adaln1.beta_w"], p[f"cp.{l}.adaln1.beta_b"])
            q = ad.matmul(u, p[f"cp.{l}.attn.wq"])
            k = ad.matmul(u, p[f"cp.{l}.attn.wk"])
            v = ad.matmul(u, p[f"cp.{l}.attn.wv"])
            split = lambda t: ad.transpose(ad.reshape(t, (B, T, nh, dh)), (0, 2, 1, 3))
            att = ad.sdpa(split(q), split(k), split(v))
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, D))
            x = ad.add(x, ad.linear(att, p[f"cp.{l}.attn.wo"], p[f"cp.{l}.attn.bo"]))
            u2 = adaln(x, cond, p[f"cp.{l}.adaln2.gamma_w"], p[f"cp.{l}.adaln2.gamma_b"],
                       p[f"cp.{l}.adaln2.beta_w"], p[f"cp.{l}.adaln2.beta_b"])
            m = _mlp2(u2, p[f"cp.{l}.mlp.w1"], p[f"cp.{l}.mlp.b1"],
                      p[f"cp.{l}.mlp.w2"], p[f"cp.{l}.mlp.b2"], act=ad.relu)
            x = ad.add(x, m)
        return x

    def recur(self, h, e):
        """f_rec: shared gated recurrent cell per entity token."""
        p = self.params
        h = ad.as_tensor(h)
        e = ad.as_tensor(e)
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(e, p["rec.wxr"]), ad.matmul(h, p["rec.whr"])), p["rec.br"]))
        u = ad.sigmoid(ad.add(ad.add(ad.matmul(e, p["rec.wxu"]), ad.matmul(h, p["rec.whu"])), p["rec.bu"]))
        c = ad.tanh(ad.add(ad.add(ad.matmul(e, p["rec.wxc"]), ad.matmul(ad.mul(r, h), p["rec.whc"])), p["rec.bc"]))
        one_minus_u = ad.sub(1.0, u)
        return ad.add(ad.mul(one_minus_u, h), ad.mul(u, c))

    def transition(self, h):
        p = self.params
        return _mlp2(h, p["tra.w1"], p["tra.b1"], p["tra.w2"], p["tra.b2"])

    def decode(self, z_hat, has_robot: bool):
        """f_dec: latent tokens -> normalized state features. Quaternions are
        renormalized and the robot rotation block is re-orthonormalized."""
        p = self.params
        trunk = ad.tanh(ad.linear(z_hat, p["dec.w1"], p["dec.b1"]))
        robot = None
        obj_tokens = trunk
        if has_robot:
            rt = ad.slice_(trunk, (slice(None), slice(0, 1), slice(None)))
            raw = ad.linear(ad.reshape(rt, (rt.shape[0], rt.shape[2])), p["dec.robot.w"], p["dec.robot.b"])
            pose = ad.slice_(raw, (..., slice(0, 6)))
            rot = orthonormalize_rotation(ad.slice_(raw, (..., slice(6, 15))))
            robot = ad.concat([pose, rot], axis=-1)
            obj_tokens = ad.slice_(trunk, (slice(None), slice(1, None), slice(None)))
        raw_obj = ad.linear(obj_tokens, p["dec.obj.w"], p["dec.obj.b"])
        pv = ad.slice_(raw_obj, (..., slice(0, 6)))
        quat = ad.quat_normalize(ad.slice_(raw_obj, (..., slice(6, 10))))
        obj = ad.concat([pv, quat], axis=-1)
        return robot, obj

    # -- one step / rollout --------------------------------------------------

    def step_tokens(self, h_prev, robot_feat_n, obj_feat_n, robot_cond, obj_cond,
                    z_prev=None):
        """One dynamics step on normalized features.

        ``z_prev`` (the coupling input, i.e. the encoding of the input state)
        may be passed in when the caller already computed it; otherwise it is
        encoded here. Returns (h_t, e_t, z_hat_t, (robot_hat_n, obj_hat_n), z_prev).
        """
        if z_prev is None:
            z_prev = self.encode(h_prev, robot_feat_n, obj_feat_n)
        cond = obj_cond
        if robot_cond is not None:
            oc = ad.as_tensor(obj_cond)
            B = ad.as_tensor(robot_cond).shape[0]
            if oc.shape[0] == 1 and B > 1:
                oc = ad.broadcast_to(oc, (B,) + oc.shape[1:])
            cond = ad.concat([robot_cond, oc], axis=1)
        e = self.couple(z_prev, cond)
        h_t = self.recur(h_prev, e)
        z_hat = self.transition(h_t)
        x_hat = self.decode(z_hat, has_robot=robot_feat_n is not None)
        return h_t, e, z_hat, x_hat, z_prev

    def zero_hidden(self, batch: int, tokens: int) -> np.ndarray:
        return np.zeros((batch, tokens, self.cfg.hidden_dim))

    def prepare_conditions(self, attrs, world, actions_n=None):
        """Normalize descriptors and build per-entity conditions.

        attrs (N, 8) or (B, N, 8); world (7,); actions_n: normalized actions
        (B, A) for one step or None. Object conditions are static per scene,
        the robot condition depends on the step's action.
        """
        attrs_n = self.stats.norm_attr(attrs)
        world_n = self.stats.norm_world(world)
        at = ad.as_tensor(attrs_n)
        if at.ndim == 2:
            obj_cond = self.object_conditions(attrs_n, world_n)
            obj_cond = ad.reshape(obj_cond, (1,) + obj_cond.shape)
        else:
            obj_cond = self.object_conditions(attrs_n, world_n)
        return obj_cond, world_n

    def robot_condition_for(self, action_raw, world_n, batch: int):
        if action_raw is None:
            return None
        a = ad.as_tensor(action_raw)
        if a.ndim == 1:
            a = ad.reshape(a, (1, a.shape[0]))
        a_n = self.stats.norm_action(a)
        rc = self.robot_condition(a_n, world_n)
        rc = ad.reshape(rc, (rc.shape[0], 1, rc.shape[1]))
        if rc.shape[0] == 1 and batch > 1:
            rc = ad.broadcast_to(rc, (batch, 1, rc.shape[2]))
        return rc
