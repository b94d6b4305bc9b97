"""Optimizer utilities: AdamW with decoupled weight decay, cosine LR schedule,
global-norm gradient clipping.

Parameters live outside any tape as plain ``{name: ndarray}`` dicts; updates
mutate the arrays in place so freshly built tapes see the new values.
"""

from __future__ import annotations

import math

import numpy as np


def init_adam_state(params: dict) -> dict:
    """Fresh first/second-moment buffers for every parameter."""
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adamw_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
) -> dict:
    """One decoupled-weight-decay Adam update, in place. Returns ``state``."""
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
    return state


def cosine_lr(t: float, t_total: float, lr_max: float, lr_min: float = 0.0) -> float:
    """lr(t) = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / T))."""
    if t_total <= 0:
        return lr_max
    frac = min(max(t / t_total, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Mutates the gradient arrays in place.
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm
