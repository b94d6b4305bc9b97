"""Tape, op, and gradient checks for the autodiff core."""

import math

import numpy as np
import pytest

from gradworld import autodiff as ad

from fd import central_diff, rel_err

GRADCHECK_TOL = 1e-4


def probe_for(shape):
    """Fixed random linear functional; breaks symmetries like unit-norm outputs."""
    return np.random.default_rng(12345).standard_normal(shape)


def scalar_loss(t):
    """Deterministic scalar probe: <out, fixed random vector>."""
    return ad.sum_(ad.mul(t, probe_for(t.shape)))


def loss_fn_numpy(op_builder):
    """Wrap an op builder into a plain-numpy scalar function for the FD oracle."""

    def f(*arrays):
        out = op_builder(*[ad.Tensor(a) for a in arrays])
        return float((out.values * probe_for(out.values.shape)).sum())

    return f


def check_op_gradients(op_builder, arrays, tol=GRADCHECK_TOL, eps=1e-5):
    """Gradcheck every input of an op against the central-difference oracle."""
    with ad.Tape() as tape:
        leaves = [tape.leaf(a) for a in arrays]
        out = op_builder(*leaves)
        loss = scalar_loss(out)
    grads = ad.backward(tape, loss)
    f = loss_fn_numpy(op_builder)
    for i, leaf in enumerate(leaves):
        numeric = central_diff(f, arrays, which=i, eps=eps)
        analytic = grads[leaf.node_id].values
        assert rel_err(analytic, numeric) < tol, f"input {i}: analytic {analytic} vs fd {numeric}"


RNG = np.random.default_rng(42)


def randn(*shape):
    return RNG.standard_normal(shape)


class TestForwardBasics:
    def test_matmul_identity(self):
        a = randn(3, 5)
        out = ad.matmul(np.eye(3), a)
        np.testing.assert_allclose(out.values, a)

    def test_square_gradient_at_3(self):
        with ad.Tape() as tape:
            x = tape.leaf(np.array(3.0))
            loss = ad.mul(x, x)
        g = ad.backward(tape, loss)[x.node_id].values
        assert g == pytest.approx(6.0)

    def test_softmax_uniform(self):
        out = ad.softmax(np.zeros(3))
        np.testing.assert_allclose(out.values, np.full(3, 1.0 / 3.0))

    def test_shape_mismatch_names_op_and_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"matmul.*\(3, 2\).*\(3, 2\)"):
            ad.matmul(randn(3, 2), randn(3, 2))

    def test_log_domain_error(self):
        with pytest.raises(ad.DomainError):
            ad.log(np.array([1.0, -2.0]))

    def test_quat_normalize_zero_error(self):
        with pytest.raises(ad.DomainError):
            ad.quat_normalize(np.zeros(4))

    def test_detached_when_no_tape(self):
        out = ad.add(randn(3), randn(3))
        assert out.node_id is None

    def test_forward_dispatch(self):
        out = ad.forward("add", [np.ones(2), np.ones(2)])
        np.testing.assert_allclose(out.values, [2.0, 2.0])
        with pytest.raises(KeyError):
            ad.forward("no_such_op", [])


class TestBackwardBasics:
    def test_sum_gradient_ones(self):
        with ad.Tape() as tape:
            x = tape.leaf(randn(4))
            loss = ad.sum_(x)
        g = ad.backward(tape, loss)[x.node_id].values
        np.testing.assert_allclose(g, np.ones(4))

    def test_mean_of_square(self):
        xv = randn(4)
        with ad.Tape() as tape:
            x = tape.leaf(xv)
            loss = ad.mean(ad.mul(x, x))
        g = ad.backward(tape, loss)[x.node_id].values
        np.testing.assert_allclose(g, 2.0 * xv / 4.0)

    def test_non_scalar_loss_rejected(self):
        with ad.Tape() as tape:
            x = tape.leaf(randn(4))
            y = ad.mul(x, x)
        with pytest.raises(ad.ShapeError):
            ad.backward(tape, y)

    def test_unreachable_leaf_gets_zero(self):
        with ad.Tape() as tape:
            x = tape.leaf(randn(3))
            y = tape.leaf(randn(3))
            loss = ad.sum_(x)
        grads = ad.backward(tape, loss)
        np.testing.assert_allclose(grads[y.node_id].values, np.zeros(3))

    def test_grad_accumulates_over_reuse(self):
        with ad.Tape() as tape:
            x = tape.leaf(np.array([2.0]))
            loss = ad.sum_(ad.add(ad.mul(x, x), x))
        g = ad.backward(tape, loss)[x.node_id].values
        np.testing.assert_allclose(g, [5.0])


class TestStopGradient:
    def test_values_unchanged(self):
        xv = randn(5)
        with ad.Tape() as tape:
            x = tape.leaf(xv)
            y = ad.stop_gradient(x)
        np.testing.assert_allclose(y.values, xv)

    def test_blocked_branch_zero(self):
        with ad.Tape() as tape:
            x = tape.leaf(randn(4))
            loss = ad.sum_(ad.stop_gradient(x))
        g = ad.backward(tape, loss)[x.node_id].values
        np.testing.assert_allclose(g, np.zeros(4))

    def test_mixed_branch_fd(self):
        # d/dx sum(x + sg(x)) == ones: only the live branch contributes.
        xv = randn(4)
        with ad.Tape() as tape:
            x = tape.leaf(xv)
            loss = ad.sum_(ad.add(x, ad.stop_gradient(x)))
        g = ad.backward(tape, loss)[x.node_id].values
        np.testing.assert_allclose(g, np.ones(4))

        # FD oracle on the non-stopped branch alone agrees.
        def f(a):
            return float((a + a).sum()) / 2 + float(a.sum()) / 2  # sum(x) + const structure

        numeric = central_diff(lambda a: float(a.sum()) + float(a.sum()) * 0, [xv], 0)
        np.testing.assert_allclose(g, numeric, atol=1e-7)


class TestGradcheckAllOps:
    """Randomized gradcheck for every differentiable registered op."""

    def test_add(self):
        check_op_gradients(lambda a, b: ad.add(a, b), [randn(3, 4), randn(3, 4)])

    def test_add_broadcast(self):
        check_op_gradients(lambda a, b: ad.add(a, b), [randn(3, 4), randn(4)])

    def test_sub(self):
        check_op_gradients(lambda a, b: ad.sub(a, b), [randn(3, 4), randn(3, 4)])

    def test_mul(self):
        check_op_gradients(lambda a, b: ad.mul(a, b), [randn(3, 4), randn(3, 4)])

    def test_mul_broadcast_scalar(self):
        check_op_gradients(lambda a, b: ad.mul(a, b), [randn(3, 4), randn(1)])

    def test_div(self):
        b = randn(3, 4)
        b = np.sign(b) * (np.abs(b) + 0.5)
        check_op_gradients(lambda a, c: ad.div(a, c), [randn(3, 4), b])

    def test_neg(self):
        check_op_gradients(lambda a: ad.neg(a), [randn(3, 4)])

    def test_matmul(self):
        check_op_gradients(lambda a, b: ad.matmul(a, b), [randn(3, 4), randn(4, 2)])

    def test_matmul_batched(self):
        check_op_gradients(lambda a, b: ad.matmul(a, b), [randn(2, 3, 4), randn(2, 4, 2)])

    def test_matmul_broadcast_batch(self):
        check_op_gradients(lambda a, b: ad.matmul(a, b), [randn(2, 3, 4), randn(4, 2)])

    def test_broadcast(self):
        check_op_gradients(lambda a: ad.broadcast_to(a, (3, 4)), [randn(4)])

    def test_concat(self):
        check_op_gradients(lambda a, b: ad.concat([a, b], axis=-1), [randn(2, 3), randn(2, 2)])

    def test_slice(self):
        check_op_gradients(lambda a: ad.slice_(a, (slice(0, 2), slice(1, 3))), [randn(3, 4)])

    def test_reshape(self):
        check_op_gradients(lambda a: ad.reshape(a, (4, 3)), [randn(3, 4)])

    def test_transpose(self):
        check_op_gradients(lambda a: ad.transpose(a, (1, 0, 2)), [randn(2, 3, 4)])

    def test_sum_axes(self):
        check_op_gradients(lambda a: ad.sum_(a, axes=1), [randn(3, 4)])

    def test_mean_axes_keepdims(self):
        check_op_gradients(lambda a: ad.mean(a, axes=(0,), keepdims=True), [randn(3, 4)])

    def test_tanh(self):
        check_op_gradients(lambda a: ad.tanh(a), [randn(3, 4)])

    def test_sigmoid(self):
        check_op_gradients(lambda a: ad.sigmoid(a), [randn(3, 4)])

    def test_relu(self):
        # Keep inputs away from the kink where FD is ill-defined.
        x = randn(3, 4)
        x = np.where(np.abs(x) < 0.05, 0.2, x)
        check_op_gradients(lambda a: ad.relu(a), [x])

    def test_exp(self):
        check_op_gradients(lambda a: ad.exp(a), [randn(3, 4)])

    def test_log(self):
        check_op_gradients(lambda a: ad.log(a), [np.abs(randn(3, 4)) + 0.5])

    def test_sqrt(self):
        check_op_gradients(lambda a: ad.sqrt(a), [np.abs(randn(3, 4)) + 0.5])

    def test_clamp(self):
        x = randn(3, 4)
        x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, 0.5, x)  # stay off the clip edges
        check_op_gradients(lambda a: ad.clamp(a, -1.0, 1.0), [x])

    def test_acos(self):
        check_op_gradients(lambda a: ad.acos(a), [np.tanh(randn(3, 4)) * 0.8])

    def test_softmax(self):
        check_op_gradients(lambda a: ad.softmax(a), [randn(3, 4)])

    def test_layer_norm(self):
        check_op_gradients(lambda a: ad.layer_norm(a), [randn(3, 8)])

    def test_smooth_l1(self):
        p, t = randn(3, 4), randn(3, 4)
        d = np.abs(p - t)
        p = np.where(np.abs(d - 1.0) < 0.05, p + 0.2, p)  # away from the beta transition
        check_op_gradients(lambda a, b: ad.smooth_l1(a, b), [p, t])

    def test_squared_error(self):
        check_op_gradients(lambda a, b: ad.squared_error(a, b), [randn(3, 4), randn(3, 4)])

    def test_sdpa(self):
        check_op_gradients(
            lambda q, k, v: ad.sdpa(q, k, v),
            [randn(2, 3, 4), randn(2, 5, 4), randn(2, 5, 4)],
            tol=1e-3,
        )

    def test_quat_normalize(self):
        q = randn(3, 4)
        q += np.sign(q.sum(axis=-1, keepdims=True)) * 0.5  # keep away from zero norm
        check_op_gradients(lambda a: ad.quat_normalize(a), [q])

    def test_rotmat_compose(self):
        check_op_gradients(lambda a, b: ad.rotmat_compose(a, b), [randn(2, 3, 3), randn(2, 3, 3)])


class TestCompositeGradcheck:
    def test_mlp_composite(self):
        """A two-layer MLP graph matches the FD oracle end to end."""
        arrays = [randn(5, 3), randn(3, 8), randn(8), randn(8, 2), randn(2)]

        def build(x, w1, b1, w2, b2):
            h = ad.tanh(ad.linear(x, w1, b1))
            return ad.linear(h, w2, b2)

        check_op_gradients(build, arrays, tol=1e-4)

    def test_attention_rows_sum_to_one(self):
        scores = ad.softmax(randn(2, 4, 4))
        np.testing.assert_allclose(scores.values.sum(axis=-1), np.ones((2, 4)), atol=1e-9)


class TestDeterminism:
    def test_bit_identical_replay(self):
        def run():
            rng = np.random.default_rng(7)
            xv = rng.standard_normal((6, 6))
            wv = rng.standard_normal((6, 6))
            with ad.Tape() as tape:
                x = tape.leaf(xv)
                w = tape.leaf(wv)
                h = ad.tanh(ad.matmul(x, w))
                loss = ad.mean(ad.mul(h, h))
            grads = ad.backward(tape, loss)
            return loss.values.copy(), grads[x.node_id].values.copy(), grads[w.node_id].values.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)
