import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays, broadcastable_shapes

from coswin import tensor as T
from coswin.errors import ContractError, DomainError, ShapeError
from coswin.tensor import Tensor, backward, no_grad


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestTape:
    def test_chain_rule_on_shared_node(self):
        x = leaf(3.0)
        y = x * x
        z = y * x + y  # x^3 + x^2
        backward(z)
        assert x.grad == pytest.approx(3 * 9 + 2 * 3)

    def test_gradients_accumulate_across_backward_calls(self):
        x = leaf([1.0, 2.0])
        backward((x * 2.0).sum())
        backward((x * 3.0).sum())
        np.testing.assert_array_equal(x.grad, [5.0, 5.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_loss_without_grad_rejected(self):
        with pytest.raises(ContractError):
            backward(Tensor(np.ones(())))

    def test_no_grad_records_nothing(self):
        x = leaf(2.0)
        with no_grad():
            y = x * x
        assert not y.requires_grad
        assert T.is_grad_enabled()

    def test_deep_chain_does_not_recurse(self):
        x = leaf(1.0)
        y = x
        for _ in range(5000):
            y = y + 0.0
        backward(y)
        assert x.grad == 1.0

    def test_diamond_counts_each_path(self):
        x = leaf(2.0)
        a, b = x.tanh(), x.exp()
        backward(a * b)
        expect = (1 - np.tanh(2.0) ** 2) * np.exp(2.0) + np.tanh(2.0) * np.exp(2.0)
        assert x.grad == pytest.approx(expect, rel=1e-12)


class TestOps:
    def test_broadcast_gradient_reduces_to_operand_shape(self):
        a = leaf(np.ones((3, 4)))
        b = leaf(np.arange(4.0))
        backward((a * b).sum())
        assert b.grad.shape == (4,)
        np.testing.assert_array_equal(b.grad, [3.0] * 4)

    def test_bad_broadcast_raises(self):
        with pytest.raises(ShapeError):
            leaf(np.ones((2, 3))) + leaf(np.ones((4,)))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(leaf([1.0, 0.0]))

    def test_max_routes_gradient_to_first_argmax(self):
        a = leaf([[1.0, 5.0, 5.0]])
        backward(T.reduce_max(a, axis=1).sum())
        np.testing.assert_array_equal(a.grad, [[0.0, 1.0, 0.0]])

    def test_softmax_rows_sum_to_one(self, rng):
        p = T.softmax(Tensor(rng.normal(size=(5, 7)) * 30), axis=-1)
        np.testing.assert_allclose(p.data.sum(-1), 1.0, atol=1e-12)

    def test_take_accumulates_repeated_indices(self):
        table = leaf(np.zeros((3, 2)))
        backward(T.take(table, np.array([0, 2, 0, 0]), axis=0).sum())
        np.testing.assert_array_equal(table.grad[:, 0], [3.0, 0.0, 1.0])

    def test_roll_backward_is_inverse_roll(self, rng):
        a = leaf(rng.normal(size=(2, 5, 5)))
        r = Tensor(rng.normal(size=(2, 5, 5)))
        backward((T.roll(a, (2, -1), (1, 2)) * r).sum())
        np.testing.assert_array_equal(a.grad, np.roll(r.data, (-2, 1), axis=(1, 2)))

    def test_clamp_blocks_gradient_outside(self):
        a = leaf([-1.0, 0.5, 2.0])
        backward(T.clamp(a, 0.0, 1.0).sum())
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])

    def test_record_kinks_sees_relu_pattern(self):
        with T.record_kinks() as log:
            T.relu(Tensor(np.array([-1.0, 2.0])))
        assert len(log) == 1
        np.testing.assert_array_equal(log[0], [False, True])


finite = st.floats(-4, 4, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_binary_grads_match_closed_form(data):
    shapes = data.draw(broadcastable_shapes(shape=(3, 4), min_dims=0, max_dims=2))
    a = leaf(data.draw(arrays(np.float64, (3, 4), elements=finite)))
    b = leaf(data.draw(arrays(np.float64, shapes, elements=st.floats(0.5, 3, width=64))))
    backward((a * b + a / b).sum())
    bb = np.broadcast_to(b.data, (3, 4))
    np.testing.assert_allclose(a.grad, bb + 1 / bb, rtol=1e-12)
    gb = (a.data - a.data / bb**2)
    np.testing.assert_allclose(b.grad, T.unbroadcast(gb, b.shape), rtol=1e-10, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, array_shapes(max_dims=3, max_side=4), elements=finite))
def test_sum_mean_grads(x):
    a = leaf(x)
    backward(a.mean() + a.sum())
    np.testing.assert_allclose(a.grad, 1.0 + 1.0 / x.size)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3, 4), elements=finite), st.permutations([0, 1, 2]))
def test_transpose_reshape_grad_is_identity_map(x, perm):
    a = leaf(x)
    r = np.arange(x.size, dtype=np.float64).reshape(np.transpose(x, perm).shape)
    backward((T.transpose(a, perm) * Tensor(r)).sum())
    np.testing.assert_array_equal(np.transpose(a.grad, perm), r)
