"""Differentiable heads: forward values, exact gradients, packing."""
import numpy as np
import pytest

from hlmrf import forward, linear_sigmoid_head, mlp_softmax_head, vjp
from hlmrf.neural import (DifferentiableHead, HeadError, head_from_dict,
                          head_to_dict, init_weights)


def test_linear_head_zero_weights_outputs_half():
    head = linear_sigmoid_head(3, 2, seed=0)
    out = forward(head, [0.1, 0.5, 0.9], w=np.zeros(head.n_params))
    assert np.allclose(out, 0.5, atol=1e-15)


def test_outputs_stay_in_unit_interval():
    rng = np.random.default_rng(7)
    head = linear_sigmoid_head(4, 3, seed=1)
    for _ in range(20):
        out = forward(head, rng.normal(0.0, 3.0, 4))
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_mlp_softmax_groups_sum_to_one():
    head = mlp_softmax_head(3, 8, (2, 3), seed=4)
    out = forward(head, [0.2, -1.0, 0.7])
    assert out.shape == (5,)
    assert out[:2].sum() == pytest.approx(1.0, abs=1e-12)
    assert out[2:].sum() == pytest.approx(1.0, abs=1e-12)
    # zero weights: uniform within each group
    out0 = forward(head, [0.2, -1.0, 0.7], w=np.zeros(head.n_params))
    assert np.allclose(out0[:2], 0.5)
    assert np.allclose(out0[2:], 1.0 / 3.0)


def test_init_weights_bounds_and_determinism():
    head = DifferentiableHead(kind="linear-sigmoid", n_in=4, n_out=2)
    w1 = init_weights(head, 3)
    w2 = init_weights(head, 3)
    w3 = init_weights(head, 4)
    assert np.array_equal(w1, w2)
    assert not np.array_equal(w1, w3)
    assert np.abs(w1).max() <= 1.0 / np.sqrt(4)
    mlp = DifferentiableHead(kind="mlp-softmax", n_in=9, n_out=2, hidden=4)
    wm = init_weights(mlp, 0)
    k1 = 4 * (9 + 1)
    assert np.abs(wm[:k1]).max() <= 1.0 / np.sqrt(9)
    assert np.abs(wm[k1:]).max() <= 1.0 / np.sqrt(4)


def fd_grad(head, x, u, w, h=1e-6):
    grad = np.zeros_like(w)
    for j in range(w.size):
        wp, wm = w.copy(), w.copy()
        wp[j] += h
        wm[j] -= h
        grad[j] = (u @ forward(head, x, w=wp)
                   - u @ forward(head, x, w=wm)) / (2 * h)
    return grad


def test_vjp_matches_finite_differences_linear():
    rng = np.random.default_rng(0)
    head = linear_sigmoid_head(3, 2, seed=5)
    x = rng.uniform(-1.0, 1.0, 3)
    u = rng.normal(0.0, 1.0, 2)
    exact = vjp(head, x, u)
    approx = fd_grad(head, x, u, head.w)
    assert np.abs(exact - approx).max() <= 5e-6


def test_vjp_matches_finite_differences_mlp():
    rng = np.random.default_rng(1)
    head = mlp_softmax_head(4, 6, (2, 2), seed=9)
    x = rng.uniform(-1.0, 1.0, 4)
    u = rng.normal(0.0, 1.0, 4)
    exact = vjp(head, x, u)
    approx = fd_grad(head, x, u, head.w)
    assert np.abs(exact - approx).max() <= 5e-6


def test_vjp_is_linear_in_the_cotangent():
    rng = np.random.default_rng(2)
    head = mlp_softmax_head(3, 5, (3,), seed=2)
    x = rng.uniform(-1.0, 1.0, 3)
    u1 = rng.normal(0.0, 1.0, 3)
    u2 = rng.normal(0.0, 1.0, 3)
    lhs = vjp(head, x, 2.0 * u1 - 0.5 * u2)
    rhs = 2.0 * vjp(head, x, u1) - 0.5 * vjp(head, x, u2)
    assert np.abs(lhs - rhs).max() <= 1e-12


def test_head_serialization_roundtrip():
    head = mlp_softmax_head(3, 4, (2, 2), seed=6)
    back = head_from_dict(head_to_dict(head))
    assert back.kind == head.kind
    assert back.group_sizes == head.group_sizes
    assert np.array_equal(back.w, head.w)
    x = [0.1, -0.2, 0.4]
    assert np.array_equal(forward(back, x), forward(head, x))


def test_input_validation():
    with pytest.raises(HeadError):
        DifferentiableHead(kind="quadratic", n_in=2, n_out=1)
    with pytest.raises(HeadError):
        DifferentiableHead(kind="mlp-softmax", n_in=2, n_out=2, hidden=0)
    with pytest.raises(HeadError):
        DifferentiableHead(kind="mlp-softmax", n_in=2, n_out=3, hidden=2,
                           group_sizes=(2, 2))
    with pytest.raises(HeadError):
        DifferentiableHead(kind="linear-sigmoid", n_in=2, n_out=1, hidden=3)
    head = linear_sigmoid_head(3, 1)
    with pytest.raises(HeadError):
        forward(head, [0.1, 0.2])
    with pytest.raises(HeadError):
        vjp(head, [0.1, 0.2, 0.3], [1.0, 2.0])
