"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: a :class:`Tape` records every tracked operation as it
executes, and :func:`backward` replays the record in reverse to accumulate
gradients. Tapes are rebuilt per forward pass, which keeps recurrent
rollouts of varying length trivial to differentiate.

Everything is float64. Single-threaded per tape; distinct tapes share no
mutable state.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op (log of <= 0, etc.)."""


class Tensor:
    """Dense float64 array plus an optional handle onto a tape.

    ``node_id is None`` means the tensor is a detached constant: ops consume
    it but no gradient flows back to it.
    """

    __slots__ = ("values", "node_id", "tape")

    def __init__(self, values, node_id: Optional[int] = None, tape: Optional["Tape"] = None):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.values.shape}{tag})"

    # Arithmetic sugar; the free functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of ops; inputs of every node precede the node itself.

    Use as a context manager to enable gradient tracking::

        with Tape() as tape:
            x = tape.leaf(np.ones(4))
            loss = mean(mul(x, x))
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._backward_fns: list = []  # node_id -> (parent_ids, fn) or None for leaves
        self._shapes: list = []        # node_id -> shape (for zero grads)
        self._leaf_ids: list = []
        self._prev_active: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev_active = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._prev_active
        return False

    @property
    def num_nodes(self) -> int:
        return len(self._backward_fns)

    def leaf(self, values) -> Tensor:
        """Register ``values`` as a tracked leaf (gradient target)."""
        arr = np.asarray(values, dtype=np.float64)
        node_id = len(self._backward_fns)
        self._backward_fns.append(None)
        self._shapes.append(arr.shape)
        self._leaf_ids.append(node_id)
        return Tensor(arr, node_id, self)

    def leaves(self, arrays: dict) -> dict:
        """Register every array in ``arrays`` as a leaf, keyed by name."""
        return {name: self.leaf(arr) for name, arr in arrays.items()}

    def _record(self, out_values: np.ndarray, parent_ids: tuple, backward_fn) -> Tensor:
        node_id = len(self._backward_fns)
        # Topological order is structural: inputs always exist before outputs.
        assert all(p < node_id for p in parent_ids if p is not None), "cyclic tape"
        self._backward_fns.append((parent_ids, backward_fn))
        self._shapes.append(out_values.shape)
        return Tensor(out_values, node_id, self)


_ACTIVE: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _ACTIVE


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


as_tensor = _as_tensor


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    """The tape a result should be recorded on, or None for a constant."""
    if _ACTIVE is None:
        return None
    for t in tensors:
        if t.node_id is not None:
            if t.tape is not _ACTIVE:
                raise ValueError("tensor belongs to a different tape than the active one")
            return _ACTIVE
    return None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(node) for every node on ``tape``.

    Returns a map ``{node_id: Tensor}`` covering all tracked leaves; leaves
    unreachable from ``loss`` get zero gradients. ``loss`` must be scalar.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    n = tape.num_nodes
    grads: list = [None] * n

    def _accum(node_id: int, g: np.ndarray) -> None:
        if grads[node_id] is None:
            grads[node_id] = g.copy() if not g.flags.owndata else g
        else:
            grads[node_id] = grads[node_id] + g

    if loss.node_id is not None:
        if loss.tape is not tape:
            raise ValueError("loss does not belong to the given tape")
        grads[loss.node_id] = np.ones_like(loss.values)
        for node_id in range(loss.node_id, -1, -1):
            g = grads[node_id]
            if g is None:
                continue
            entry = tape._backward_fns[node_id]
            if entry is None:
                continue  # leaf
            _, fn = entry
            fn(g, _accum)

    out = {}
    for leaf_id in tape._leaf_ids:
        g = grads[leaf_id]
        if g is None:
            g = np.zeros(tape._shapes[leaf_id], dtype=np.float64)
        out[leaf_id] = Tensor(g)
    return out


def grads_by_name(grad_map: dict, leaves: dict) -> dict:
    """Re-key a backward() result by the leaf names used at registration."""
    return {name: grad_map[t.node_id].values for name, t in leaves.items()}


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.values + b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_id, b_id, a_shape, b_shape = a.node_id, b.node_id, a.values.shape, b.values.shape

    def bwd(g, accum):
        if a_id is not None:
            accum(a_id, _unbroadcast(g, a_shape))
        if b_id is not None:
            accum(b_id, _unbroadcast(g, b_shape))

    return tape._record(out, (a_id, b_id), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.values - b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_id, b_id, a_shape, b_shape = a.node_id, b.node_id, a.values.shape, b.values.shape

    def bwd(g, accum):
        if a_id is not None:
            accum(a_id, _unbroadcast(g, a_shape))
        if b_id is not None:
            accum(b_id, _unbroadcast(-g, b_shape))

    return tape._record(out, (a_id, b_id), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.values * b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_id, b_id = a.node_id, b.node_id
    av, bv = a.values, b.values

    def bwd(g, accum):
        if a_id is not None:
            accum(a_id, _unbroadcast(g * bv, av.shape))
        if b_id is not None:
            accum(b_id, _unbroadcast(g * av, bv.shape))

    return tape._record(out, (a_id, b_id), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.values / b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_id, b_id = a.node_id, b.node_id
    av, bv = a.values, b.values

    def bwd(g, accum):
        if a_id is not None:
            accum(a_id, _unbroadcast(g / bv, av.shape))
        if b_id is not None:
            accum(b_id, _unbroadcast(-g * av / (bv * bv), bv.shape))

    return tape._record(out, (a_id, b_id), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = -a.values
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id = a.node_id

    def bwd(g, accum):
        accum(a_id, -g)

    return tape._record(out, (a_id,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    out = a.values @ b.values
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(out)
    a_id, b_id = a.node_id, b.node_id
    av, bv = a.values, b.values

    def bwd(g, accum):
        if a_id is not None:
            accum(a_id, _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape))
        if b_id is not None:
            accum(b_id, _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))

    return tape._record(out, (a_id, b_id), bwd)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.values, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from e
    out = np.ascontiguousarray(out)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id, a_shape = a.node_id, a.values.shape

    def bwd(g, accum):
        accum(a_id, _unbroadcast(g, a_shape))

    return tape._record(out, (a_id,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.values for t in ts], axis=axis)
    tape = _tape_of(*ts)
    if tape is None:
        return Tensor(out)
    ids = tuple(t.node_id for t in ts)
    sizes = [t.values.shape[axis] for t in ts]
    ax = axis if axis >= 0 else out.ndim + axis
    offsets = np.cumsum([0] + sizes)

    def bwd(g, accum):
        for i, nid in enumerate(ids):
            if nid is None:
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(offsets[i], offsets[i + 1])
            accum(nid, g[tuple(sl)])

    return tape._record(out, ids, bwd)


def slice_(a, key) -> Tensor:
    """Basic slicing; ``key`` is anything numpy basic indexing accepts."""
    a = _as_tensor(a)
    out = a.values[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    out = np.ascontiguousarray(out)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id, a_shape = a.node_id, a.values.shape

    def bwd(g, accum):
        full = np.zeros(a_shape, dtype=np.float64)
        full[key] = g
        accum(a_id, full)

    return tape._record(out, (a_id,), bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from e
    out = np.ascontiguousarray(out)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id, a_shape = a.node_id, a.values.shape

    def bwd(g, accum):
        accum(a_id, g.reshape(a_shape))

    return tape._record(out, (a_id,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.ascontiguousarray(np.transpose(a.values, axes))
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id = a.node_id
    inv = tuple(np.argsort(axes))

    def bwd(g, accum):
        accum(a_id, np.ascontiguousarray(np.transpose(g, inv)))

    return tape._record(out, (a_id,), bwd)


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax if ax >= 0 else ndim + ax for ax in axes)


def sum_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    out = np.asarray(out)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id, a_shape = a.node_id, a.values.shape

    def bwd(g, accum):
        if not keepdims:
            g = np.expand_dims(g, axes)
        accum(a_id, np.broadcast_to(g, a_shape).copy())

    return tape._record(out, (a_id,), bwd)


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = np.asarray(a.values.mean(axis=axes, keepdims=keepdims))
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id, a_shape = a.node_id, a.values.shape
    count = 1
    for ax in axes:
        count *= a_shape[ax]

    def bwd(g, accum):
        if not keepdims:
            g = np.expand_dims(g, axes)
        accum(a_id, np.broadcast_to(g / count, a_shape).copy())

    return tape._record(out, (a_id,), bwd)


def _unary(a, fn_name: str, fwd, dfwd) -> Tensor:
    a = _as_tensor(a)
    out = fwd(a.values)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id = a.node_id

    def bwd(g, accum):
        accum(a_id, g * dfwd(a.values, out))

    return tape._record(out, (a_id,), bwd)


def tanh(a) -> Tensor:
    return _unary(a, "tanh", np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    def fwd(x):
        # Split by sign to avoid overflow in exp.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, "sigmoid", fwd, lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    return _unary(a, "relu", lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(np.float64))


def exp(a) -> Tensor:
    return _unary(a, "exp", np.exp, lambda x, y: y)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log: input must be strictly positive")
    return _unary(a, "log", np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    return _unary(a, "sqrt", np.sqrt, lambda x, y: 0.5 / np.maximum(y, 1e-300))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.values, lo, hi)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id = a.node_id
    mask = ((a.values > lo) & (a.values < hi)).astype(np.float64)

    def bwd(g, accum):
        accum(a_id, g * mask)

    return tape._record(out, (a_id,), bwd)


def acos(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(np.abs(a.values) > 1.0):
        raise DomainError("acos: input must lie in [-1, 1]")
    return _unary(a, "acos", np.arccos, lambda x, y: -1.0 / np.sqrt(np.maximum(1.0 - x * x, 1e-300)))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id = a.node_id

    def bwd(g, accum):
        dot = (g * out).sum(axis=-1, keepdims=True)
        accum(a_id, out * (g - dot))

    return tape._record(out, (a_id,), bwd)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Parameter-free layer normalization over the last axis."""
    a = _as_tensor(a)
    mu = a.values.mean(axis=-1, keepdims=True)
    xc = a.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id = a.node_id
    d = a.values.shape[-1]

    def bwd(g, accum):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * out).mean(axis=-1, keepdims=True)
        accum(a_id, inv * (g - gm - out * gym))

    return tape._record(out, (a_id,), bwd)


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Elementwise Smooth-L1: quadratic within ``beta`` of zero, linear outside."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_broadcast("smooth_l1", pred, target)
    d = pred.values - target.values
    ad = np.abs(d)
    out = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    tape = _tape_of(pred, target)
    if tape is None:
        return Tensor(out)
    p_id, t_id = pred.node_id, target.node_id
    p_shape, t_shape = pred.values.shape, target.values.shape
    dd = np.where(ad < beta, d / beta, np.sign(d))

    def bwd(g, accum):
        if p_id is not None:
            accum(p_id, _unbroadcast(g * dd, p_shape))
        if t_id is not None:
            accum(t_id, _unbroadcast(-g * dd, t_shape))

    return tape._record(out, (p_id, t_id), bwd)


def squared_error(pred, target) -> Tensor:
    """Elementwise (pred - target)**2."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_broadcast("squared_error", pred, target)
    d = pred.values - target.values
    out = d * d
    tape = _tape_of(pred, target)
    if tape is None:
        return Tensor(out)
    p_id, t_id = pred.node_id, target.node_id
    p_shape, t_shape = pred.values.shape, target.values.shape

    def bwd(g, accum):
        if p_id is not None:
            accum(p_id, _unbroadcast(2.0 * g * d, p_shape))
        if t_id is not None:
            accum(t_id, _unbroadcast(-2.0 * g * d, t_shape))

    return tape._record(out, (p_id, t_id), bwd)


def quat_normalize(a, eps: float = 1e-12) -> Tensor:
    """Normalize quaternions along the last axis (size 4) to unit length."""
    a = _as_tensor(a)
    if a.shape[-1] != 4:
        raise ShapeError(f"quat_normalize: last axis must be 4, got {a.shape}")
    norm = np.sqrt((a.values * a.values).sum(axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise DomainError("quat_normalize: zero-magnitude quaternion")
    out = a.values / norm
    tape = _tape_of(a)
    if tape is None:
        return Tensor(out)
    a_id = a.node_id

    def bwd(g, accum):
        dot = (g * out).sum(axis=-1, keepdims=True)
        accum(a_id, (g - out * dot) / norm)

    return tape._record(out, (a_id,), bwd)


def stop_gradient(a) -> Tensor:
    """Identity forward; blocks all gradient flow into ``a``'s lineage."""
    a = _as_tensor(a)
    tape = _tape_of(a)
    if tape is None:
        return Tensor(a.values)

    def bwd(g, accum):
        pass

    return tape._record(a.values, (a.node_id,), bwd)


# ---------------------------------------------------------------------------
# composites (built from the primitives above; no fused backward of their own)


def sdpa(q, k, v) -> Tensor:
    """Scaled-dot-product attention composed from matmul + softmax + scale.

    Shapes: q (..., T, d), k (..., S, d), v (..., S, dv) -> (..., T, dv).
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, _swap_last_two(k.ndim))), 1.0 / math.sqrt(d))
    return matmul(softmax(scores), v)


def _swap_last_two(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def rotmat_compose(a, b) -> Tensor:
    """Compose rotation matrices: (..., 3, 3) @ (..., 3, 3)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-2:] != (3, 3) or b.shape[-2:] != (3, 3):
        raise ShapeError(f"rotmat_compose: trailing dims must be (3,3), got {a.shape} and {b.shape}")
    return matmul(a, b)


def linear(x, w, b) -> Tensor:
    """x @ w + b convenience for MLP layers."""
    return add(matmul(x, w), b)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.values.shape} and {b.values.shape} do not broadcast") from e


# ---------------------------------------------------------------------------
# op registry / generic entry point

OP_REGISTRY: dict = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "broadcast": broadcast_to,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_,
    "mean": mean,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "clamp": clamp,
    "acos": acos,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "smooth_l1": smooth_l1,
    "squared_error": squared_error,
    "sdpa": sdpa,
    "quat_normalize": quat_normalize,
    "rotmat_compose": rotmat_compose,
    "stop_gradient": stop_gradient,
}


def forward(op_kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Name-based dispatch into the op registry.

    Records the result on the active tape when tracking is enabled;
    returns a detached constant otherwise.
    """
    if op_kind not in OP_REGISTRY:
        raise KeyError(f"unknown op kind: {op_kind!r}")
    return OP_REGISTRY[op_kind](*inputs, **(attrs or {}))
