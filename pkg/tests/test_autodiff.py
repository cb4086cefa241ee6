import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intpinn.autodiff import Tape, backward, grad_check
from intpinn.suites import gradient_check_case


def _grad(build, x):
    tape = Tape()
    leaf = tape.variable(x)
    return backward(tape, build(tape, leaf), [leaf])


def test_linear_map_gradient():
    w = np.array([1.5, -2.0, 0.25])
    g = _grad(lambda t, x: t.sum(t.mul(x, w)), np.ones(3))
    assert np.allclose(g, w)


def test_tangent_channel_of_linear_map():
    tape = Tape()
    w = tape.variable(np.array([[2.0], [-3.0]]))
    x = tape.constant(np.array([[0.4, 0.7]]), tangent=np.array([[1.0, 0.0]]))
    y = tape.matmul(x, w)
    assert np.allclose(y.tangent, 2.0)
    loss = tape.sum(tape.tangent_of(y))
    assert np.allclose(backward(tape, loss, [w]), [1.0, 0.0])


@pytest.mark.parametrize("op", ["tanh", "silu", "square", "sqrt"])
def test_unary_ops_match_finite_differences(op):
    x = np.array([0.3, 1.1, 2.0, 0.7])

    def build(t, leaf):
        return t.sum(getattr(t, op)(leaf))

    def f(v):
        t = Tape()
        return float(build(t, t.constant(v)).value)

    assert np.allclose(_grad(build, x), grad_check(f, x), rtol=1e-6, atol=1e-9)


def test_directional_derivative_loss_gradient():
    rng = np.random.default_rng(3)
    w1 = rng.normal(size=(2, 5))
    x = rng.normal(size=(4, 2))
    v = np.array([0.6, 0.8])

    def loss(t, w):
        h = t.tanh(t.matmul(t.constant(x, tangent=v), w))
        return t.sum(t.square(t.tangent_of(h)))

    def f(flat):
        t = Tape()
        return float(loss(t, t.constant(flat.reshape(2, 5))).value)

    assert np.allclose(_grad(loss, w1).ravel(), grad_check(f, w1.ravel()), rtol=1e-6, atol=1e-9)


def test_detach_blocks_gradient():
    tape = Tape()
    x = tape.variable(np.array([2.0]))
    y = tape.mul(tape.detach(x), x)
    assert np.allclose(backward(tape, tape.sum(y), [x]), [2.0])


def test_unreached_leaf_gets_zero_gradient():
    tape = Tape()
    a = tape.variable(np.ones(3))
    b = tape.variable(np.ones(2))
    assert np.allclose(backward(tape, tape.sum(a), [a, b]), [1, 1, 1, 0, 0])


def test_backward_rejects_non_scalar_and_foreign_nodes():
    tape = Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(ValueError):
        backward(tape, tape.mul(x, 2.0), [x])
    other = Tape()
    with pytest.raises(ValueError):
        backward(other, tape.sum(x), [x])
    with pytest.raises(ValueError):
        tape.add(x, other.variable(np.ones(3)))


def test_broadcast_add_unbroadcasts_gradient():
    tape = Tape()
    m = tape.variable(np.ones((3, 2)))
    b = tape.variable(np.zeros(2))
    g = backward(tape, tape.sum(tape.add(m, b)), [b])
    assert np.allclose(g, [3.0, 3.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_random_network_losses_match_finite_differences(seed):
    case = gradient_check_case(seed)
    assert case["rel_err"] < 1e-6
    assert case["loss_matches"]
