"""Autodiff engine: gradients against finite differences, ops against loop oracles."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from padnet.errors import DimensionError, NumericError, UsageError
from padnet.tensor_core import (
    Adam,
    AdamState,
    BatchNorm2d,
    Conv2d,
    Parameter,
    Tensor,
    adam_step,
    batch_norm,
    concat,
    conv2d,
    conv_transpose2d,
    get_default_dtype,
    global_max_pool2d,
    linear,
    max_pool2d,
    mse_loss,
    no_grad,
    precision,
    upsample_bilinear,
)
from padnet.tensor_core.functional import bilinear_matrix, conv_transpose_output_size
from padnet.tensor_core.tensor import is_grad_enabled, unbroadcast

from conftest import GRAD_TOL, gradient_error

SEEDS = range(10)


# ----------------------------------------------------------------------------
# Loop oracles
# ----------------------------------------------------------------------------


def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            win = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", win, w)
    return out + (0 if b is None else b[None, :, None, None])


def conv_transpose_loops(x, w, b, stride, pad, out_pad):
    """Scatter every input pixel's kernel into the output, then crop the padding."""
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    ho = (h - 1) * stride - 2 * pad + k + out_pad
    wo = (wd - 1) * stride - 2 * pad + k + out_pad
    full = np.zeros((n, co, max((h - 1) * stride + k, pad + ho), max((wd - 1) * stride + k, pad + wo)))
    for i in range(h):
        for j in range(wd):
            full[:, :, i * stride : i * stride + k, j * stride : j * stride + k] += np.einsum(
                "nc,cokl->nokl", x[:, :, i, j], w)
    out = full[:, :, pad : pad + ho, pad : pad + wo]
    return out + (0 if b is None else b[None, :, None, None])


def max_pool_loops(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = xp[:, :, i * stride : i * stride + k, j * stride : j * stride + k].max(axis=(2, 3))
    return out


# ----------------------------------------------------------------------------
# Forward correctness
# ----------------------------------------------------------------------------


class TestConvolutionOracles:
    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 2, 5), (2, 1, 3), (1, 3, 7), (2, 3, 7)])
    def test_conv2d_matches_loops(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 11, 9))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        with precision("float64"):
            got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride,pad,out_pad,k", [(2, 2, 1, 5), (1, 0, 0, 3), (2, 1, 0, 3), (3, 1, 2, 4)])
    def test_conv_transpose_matches_scatter(self, rng, stride, pad, out_pad, k):
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(2)
        with precision("float64"):
            got = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, out_pad).data
        np.testing.assert_allclose(got, conv_transpose_loops(x, w, b, stride, pad, out_pad), atol=1e-12)

    def test_transpose_is_adjoint_of_conv(self, rng):
        # <conv(x), y> == <x, conv_T(y)> for matching geometry.
        x = rng.standard_normal((1, 3, 16, 16))
        w = rng.standard_normal((5, 3, 5, 5))
        with precision("float64"):
            y_shape = conv2d(Tensor(x), Tensor(w), None, 2, 2).shape
            y = rng.standard_normal(y_shape)
            lhs = np.sum(conv2d(Tensor(x), Tensor(w), None, 2, 2).data * y)
            rhs = np.sum(x * conv_transpose2d(Tensor(y), Tensor(w), None, 2, 2, 1).data)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_transpose_output_size_doubles(self):
        assert conv_transpose_output_size(16, 5, 2, 2, 1) == 32
        assert conv_transpose_output_size(4, 5, 2, 2, 1) == 8

    def test_conv_rejects_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            conv2d(Tensor(rng.standard_normal((1, 2, 5, 5))), Tensor(rng.standard_normal((1, 3, 3, 3))))

    def test_conv_rejects_nan_input(self):
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))))


class TestPoolingAndResampling:
    @pytest.mark.parametrize("k,stride,pad", [(3, 2, 1), (2, 2, 0), (3, 1, 1)])
    def test_max_pool_matches_loops(self, rng, k, stride, pad):
        x = rng.standard_normal((2, 3, 9, 8))
        got = max_pool2d(Tensor(x, dtype=np.float64), k, stride, pad).data
        np.testing.assert_array_equal(got, max_pool_loops(x, k, stride, pad))

    def test_global_max_pool(self, rng):
        x = rng.standard_normal((3, 4, 5, 6))
        np.testing.assert_array_equal(global_max_pool2d(Tensor(x, dtype=np.float64)).data, x.max(axis=(2, 3)))

    def test_bilinear_rows_are_stochastic(self):
        for out_size, in_size in [(64, 4), (7, 3), (5, 5), (3, 8)]:
            m = bilinear_matrix(out_size, in_size)
            np.testing.assert_allclose(m.sum(axis=1), 1.0)
            assert (m >= 0).all()

    def test_bilinear_same_size_is_identity(self):
        np.testing.assert_array_equal(bilinear_matrix(6, 6), np.eye(6))

    def test_upsample_constant_stays_constant(self):
        x = Tensor(np.full((1, 1, 4, 4), 0.3), dtype=np.float64)
        np.testing.assert_allclose(upsample_bilinear(x, (64, 64)).data, 0.3)

    def test_upsample_single_pixel_broadcasts(self):
        x = Tensor(np.array([[[[2.0]]]]), dtype=np.float64)
        np.testing.assert_allclose(upsample_bilinear(x, (3, 5)).data, 2.0)


class TestBatchNorm:
    def test_training_normalises_batch(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
        bn = BatchNorm2d(3)
        with precision("float64"):
            bn.running_mean = bn.running_mean.astype(np.float64)
            y = bn(Tensor(x)).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)

    def test_running_statistics_update(self, rng):
        x = rng.normal(1.0, 2.0, size=(2, 2, 4, 4))
        rm, rv = np.zeros(2), np.ones(2)
        batch_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_eval_uses_running_statistics(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
        w, b = np.array([2.0, 3.0]), np.array([0.5, -0.5])
        y = batch_norm(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64),
                       rm.copy(), rv.copy(), False).data
        expect = (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
        np.testing.assert_allclose(y, expect * w[None, :, None, None] + b[None, :, None, None])


# ----------------------------------------------------------------------------
# Gradients (64-bit, central differences)
# ----------------------------------------------------------------------------


class TestGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, seed):
        r = np.random.default_rng(seed)
        err = gradient_error(lambda x, w, b: conv2d(x, w, b, 2, 2),
                             [r.standard_normal((2, 2, 6, 6)), r.standard_normal((3, 2, 5, 5)), r.standard_normal(3)],
                             seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv_transpose2d(self, seed):
        r = np.random.default_rng(seed)
        err = gradient_error(lambda x, w, b: conv_transpose2d(x, w, b, 2, 2, 1),
                             [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 3, 5, 5)), r.standard_normal(3)],
                             seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_linear(self, seed):
        r = np.random.default_rng(seed)
        err = gradient_error(linear, [r.standard_normal((3, 5)), r.standard_normal((2, 5)), r.standard_normal(2)], seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batch_norm_training(self, seed):
        r = np.random.default_rng(seed)

        def fn(x, w, b):
            return batch_norm(x, w, b, np.zeros(3), np.ones(3), True)

        err = gradient_error(fn, [r.standard_normal((2, 3, 3, 3)), r.uniform(0.5, 2, 3), r.standard_normal(3)], seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_batch_norm_eval(self, seed):
        r = np.random.default_rng(seed)
        rm, rv = r.standard_normal(3), r.uniform(0.5, 2.0, 3)

        def fn(x, w, b):
            return batch_norm(x, w, b, rm, rv, False)

        err = gradient_error(fn, [r.standard_normal((2, 3, 3, 3)), r.uniform(0.5, 2, 3), r.standard_normal(3)], seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_max_pool(self, seed):
        # Distinct values keep the argmax away from ties, where max is not differentiable.
        r = np.random.default_rng(seed)
        x = r.permutation(2 * 2 * 7 * 7).reshape(2, 2, 7, 7) * 0.01
        assert gradient_error(lambda t: max_pool2d(t, 3, 2, 1), [x], seed) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_global_max_pool(self, seed):
        r = np.random.default_rng(seed)
        x = r.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.01
        assert gradient_error(global_max_pool2d, [x], seed) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_upsample(self, seed):
        r = np.random.default_rng(seed)
        assert gradient_error(lambda t: upsample_bilinear(t, (8, 12)), [r.standard_normal((1, 2, 2, 3))], seed) < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_elementwise_chain(self, seed):
        r = np.random.default_rng(seed)

        def fn(a, b):
            return (a * b + a / (b.square() + 1.0) - (a + 3.0).sqrt() + (b.square() + 1.0).log()
                    + (-a).exp() + a ** 3 - 2.0 * b.relu() + 1.0 / (a + 2.0))

        err = gradient_error(fn, [r.uniform(-1, 1, (3, 4)), r.uniform(-1, 1, (3, 4))], seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_broadcast_reduce_reshape(self, seed):
        r = np.random.default_rng(seed)

        def fn(a, b):
            z = (a + b).sum(axis=1, keepdims=True) * a.mean(axis=0)
            return z.reshape(1, -1).transpose() @ Tensor(np.ones((1, 2)))

        err = gradient_error(fn, [r.standard_normal((3, 4)), r.standard_normal((1, 4))], seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_and_index(self, seed):
        r = np.random.default_rng(seed)
        err = gradient_error(lambda a, b: concat([a, b * 2.0], axis=1)[:, 1:4],
                             [r.standard_normal((2, 2, 3)), r.standard_normal((2, 3, 3))], seed)
        assert err < GRAD_TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mse_loss(self, seed):
        r = np.random.default_rng(seed)
        assert gradient_error(mse_loss, [r.standard_normal((4, 3)), r.standard_normal((4, 3))], seed) < GRAD_TOL


# ----------------------------------------------------------------------------
# Engine behaviour
# ----------------------------------------------------------------------------


class TestEngine:
    def test_shared_leaf_accumulates(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True, dtype=np.float64)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0, 7.0])

    def test_backward_twice_accumulates_on_leaves(self):
        x = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_backward_needs_grad(self):
        with pytest.raises(UsageError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = x * 2.0
        assert is_grad_enabled()
        assert not y.requires_grad and y._parents == ()

    def test_precision_context_restores_default(self):
        before = get_default_dtype()
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert get_default_dtype() == before
        assert Tensor([1.0]).dtype == np.float32

    def test_deep_chain_has_no_recursion_limit(self):
        x = Tensor(np.ones(1), requires_grad=True, dtype=np.float64)
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.data())
    def test_unbroadcast_inverts_broadcasting(self, shape, data):
        shape = tuple(shape)
        target = tuple(data.draw(st.sampled_from([1, s])) for s in shape)
        g = np.ones((2,) + shape)
        reduced = unbroadcast(g, target)
        assert reduced.shape == target
        assert reduced.sum() == g.sum()


class TestAdam:
    def test_matches_hand_computed_updates(self):
        p = Parameter(np.array([1.0, -2.0]), dtype=np.float64)
        state = AdamState(lr=0.1)
        grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3]), np.array([-0.4, 0.1])]
        m = np.zeros(2)
        v = np.zeros(2)
        expect = p.data.copy()
        for t, g in enumerate(grads, start=1):
            p.grad = g.copy()
            adam_step([p], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            expect = expect - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            np.testing.assert_allclose(p.data, expect, rtol=1e-12)

    def test_first_step_moves_by_lr(self):
        p = Parameter(np.array([0.0, 0.0, 0.0]), dtype=np.float64)
        p.grad = np.array([3.0, -0.01, 100.0])
        adam_step([p], AdamState(lr=1e-3))
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3, -1e-3], rtol=1e-5)

    def test_group_learning_rates(self):
        a = Parameter(np.zeros(1), dtype=np.float64)
        b = Parameter(np.zeros(1), dtype=np.float64)
        opt = Adam({"fast": [a], "slow": [b]}, lr=1.0)
        opt.set_lr("slow", 0.01)
        a.grad, b.grad = np.ones(1), np.ones(1)
        opt.step()
        np.testing.assert_allclose([a.data[0], b.data[0]], [-1.0, -0.01], rtol=1e-6)

    def test_projection_clamps_to_lower_bound(self):
        p = Parameter(np.array([0.0005]), lower=0.0, dtype=np.float64)
        p.grad = np.array([1.0])
        adam_step([p], AdamState(lr=0.01))
        assert p.data[0] == 0.0

    def test_missing_gradient_is_usage_error(self):
        with pytest.raises(UsageError):
            adam_step([Parameter(np.zeros(1))], AdamState())

    def test_unknown_group_rejected(self):
        with pytest.raises(UsageError):
            Adam({"w1": [Parameter(np.zeros(1))]}).set_lr("w9", 0.1)

    def test_minimises_quadratic(self):
        p = Parameter(np.array([5.0, -3.0]), dtype=np.float64)
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            ((p - Tensor(np.array([1.0, 2.0]), dtype=np.float64)).square().sum()).backward()
            opt.step()
        np.testing.assert_allclose(p.data, [1.0, 2.0], atol=1e-3)


class TestModules:
    def test_state_dict_round_trip(self, rng):
        a, b = Conv2d(2, 3, 3, rng=rng), Conv2d(2, 3, 3, rng=np.random.default_rng(99))
        loaded = b.load_state_dict(a.state_dict(), strict=True)
        assert sorted(loaded) == ["bias", "weight"]
        np.testing.assert_array_equal(a.weight.data, b.weight.data)

    def test_failed_load_mutates_nothing(self, rng):
        conv = Conv2d(2, 3, 3, rng=rng)
        before = conv.state_dict()
        bad = {"bias": np.zeros(3), "weight": np.zeros((1, 1, 1, 1))}
        with pytest.raises(DimensionError):
            conv.load_state_dict(bad)
        np.testing.assert_array_equal(conv.bias.data, before["bias"])
