"""Reverse-mode differentiation checks against hand-derived and finite-difference gradients."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vgrpo_lab.core import tensor as T
from vgrpo_lab.core.layers import Activation, MlpParams, forward, init_mlp
from vgrpo_lab.core.tensor import Tensor, backward, no_grad, stop_gradient
from vgrpo_lab.oracle import finite_diff_gradient
from vgrpo_lab.utils.exceptions import ConfigurationError, UsageError


def _grad(build, value):
    """Gradient of the scalar ``build(w)`` at ``value``."""
    w = Tensor(value, requires_grad=True)
    return backward(build(w))[w]


class TestHandDerived:
    def test_sum_of_squares(self):
        grad = _grad(lambda w: T.sum_(w * w), [1.0, 2.0])
        np.testing.assert_array_equal(grad, [2.0, 4.0])

    def test_mse_at_zero_weights(self):
        x = np.array([1.0, -2.0, 0.5])
        y = np.array([3.0, 1.0, -4.0])
        grad = _grad(lambda w: T.mean(T.square(w * x - y)), np.zeros(3))
        np.testing.assert_allclose(grad, -2.0 * x * y / 3)

    def test_stop_gradient_blocks_one_factor(self):
        grad = _grad(lambda x: x * stop_gradient(x), 3.0)
        assert float(grad) == pytest.approx(3.0)

    def test_stop_gradient_keeps_values(self, rng):
        x = Tensor(rng.standard_normal(5), requires_grad=True)
        np.testing.assert_array_equal(stop_gradient(x).data, x.data)
        np.testing.assert_array_equal(stop_gradient(stop_gradient(x)).data, x.data)
        assert not stop_gradient(x).requires_grad

    def test_gradient_accumulates_over_reuse(self):
        grad = _grad(lambda w: T.sum_(w) + T.sum_(w * 2.0), [1.0, 1.0])
        np.testing.assert_array_equal(grad, [3.0, 3.0])

    def test_broadcast_gradient_sums_down(self):
        bias = Tensor(np.zeros(3), requires_grad=True)
        loss = T.sum_(T.constant(np.ones((4, 3))) + bias)
        np.testing.assert_array_equal(backward(loss)[bias], [4.0, 4.0, 4.0])

    def test_minimum_routes_ties_to_first_argument(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([1.0, 0.0], requires_grad=True)
        grads = backward(T.sum_(T.minimum(a, b)))
        np.testing.assert_array_equal(grads[a], [1.0, 0.0])
        np.testing.assert_array_equal(grads[b], [0.0, 1.0])

    def test_clip_has_zero_gradient_outside_band(self):
        grad = _grad(lambda w: T.sum_(T.clip(w, -1.0, 1.0)), [-2.0, 0.5, 3.0])
        np.testing.assert_array_equal(grad, [0.0, 1.0, 0.0])

    def test_grad_is_stored_on_leaf(self):
        w = Tensor([2.0], requires_grad=True)
        backward(T.sum_(w * w * w))
        np.testing.assert_allclose(w.grad, [12.0])


class TestTape:
    def test_non_scalar_loss_is_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            backward(w * 2.0)

    def test_backward_twice_is_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.sum_(w * w)
        backward(loss)
        with pytest.raises(UsageError):
            backward(loss)

    def test_tape_is_cleared(self):
        w = Tensor([1.0], requires_grad=True)
        backward(T.sum_(T.exp(w)))
        assert len(T.get_tape()) == 0

    def test_no_grad_records_nothing(self):
        w = Tensor([1.0], requires_grad=True)
        with no_grad():
            out = T.sum_(w * w)
        assert out.is_leaf() and not out.requires_grad

    def test_private_tape_isolated(self):
        outer = T.get_tape()
        w = Tensor([1.0], requires_grad=True)
        with T.private_tape() as tape:
            grads = backward(T.sum_(w * 3.0))
            assert tape is T.get_tape()
        assert T.get_tape() is outer
        np.testing.assert_array_equal(grads[w], [3.0])

    def test_data_is_read_only(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_item_requires_single_element(self):
        with pytest.raises(UsageError):
            Tensor([1.0, 2.0]).item()


UNARY_OPS = {
    "exp": T.exp,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "silu": T.silu,
    "square": T.square,
    "cube": lambda a: T.power(a, 3.0),
    "log": lambda a: T.log(T.square(a) + 0.5),
    "abs": lambda a: T.abs_(a + 10.0),
    "reciprocal": lambda a: T.div(1.0, T.square(a) + 1.0),
    "row_mean": lambda a: T.mean(a, axis=1, keepdims=True) * a,
    "reshape_concat": lambda a: T.concat([T.reshape(a, (3, 2)), T.reshape(a, (3, 2))], axis=0),
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(UNARY_OPS))
    def test_unary_ops(self, name, rng):
        op = UNARY_OPS[name]
        x0 = rng.uniform(-1.5, 1.5, size=(2, 3))
        weights = rng.standard_normal(op(T.constant(x0)).shape)

        def loss(values):
            return T.sum_(op(values) * weights)

        auto = _grad(loss, x0)
        with no_grad():
            numeric = finite_diff_gradient(lambda v: loss(T.constant(v)).item(), x0)
        np.testing.assert_allclose(auto, numeric, rtol=1e-4, atol=1e-7)

    @given(seed=st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_binary_ops(self, seed):
        rng = np.random.default_rng(seed)
        a0 = rng.uniform(-1.0, 1.0, size=(3, 2))
        b0 = rng.uniform(0.5, 1.5, size=(2, 4))

        def loss(a, b):
            product = T.matmul(a, b)
            gate = T.sigmoid(T.sum_(b, axis=0))
            scale = T.square(T.sum_(a)) + 2.0
            return T.sum_(T.tanh(product) * gate - product / scale)

        a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
        grads = backward(loss(a, b))
        with no_grad():
            numeric = finite_diff_gradient(
                lambda p: loss(T.constant(p["a"]), T.constant(p["b"])).item(), {"a": a0, "b": b0})
        np.testing.assert_allclose(grads[a], numeric["a"], rtol=1e-4, atol=1e-7)
        np.testing.assert_allclose(grads[b], numeric["b"], rtol=1e-4, atol=1e-7)

    @pytest.mark.parametrize("activation", [Activation.TANH, Activation.SILU])
    def test_random_mlps(self, activation):
        """One hundred random networks, every parameter checked."""
        for seed in range(50):
            rng = np.random.default_rng(seed)
            widths = [3] + list(rng.integers(2, 6, size=2)) + [2]
            params = init_mlp(widths, activation, rng)
            inputs = T.constant(rng.standard_normal((4, 3)))
            target = rng.standard_normal((4, 2))

            def loss(p: MlpParams):
                return T.mean(T.square(forward(p, inputs) - target))

            grads = backward(loss(params))
            auto = {name: grads[t] for name, t in params.named_tensors()}
            with no_grad():
                numeric = finite_diff_gradient(
                    lambda arrays: loss(params.replace(arrays)).item(),
                    {name: t.data for name, t in params.named_tensors()})
            for name in auto:
                np.testing.assert_allclose(auto[name], numeric[name], rtol=1e-4, atol=1e-7,
                                           err_msg=f"seed {seed}, {name}")
