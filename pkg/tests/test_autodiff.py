import math

import numpy as np
import pytest

from vifo.autodiff import (
    NonFiniteError,
    Tensor,
    grad,
    logsumexp,
    numeric_grad,
    relative_error,
)
from vifo.networks import MlpSpec, forward_mean, init_network


def _check_gradient(fn, leaves, tol=1e-5):
    analytic = grad(fn(), leaves)
    numeric = numeric_grad(lambda: fn().item(), leaves)
    assert relative_error(analytic, numeric) < tol


def test_square_gradient():
    x = Tensor.leaf(3.0)
    (g,) = grad(x.square(), [x])
    assert g == pytest.approx(6.0)


def test_softplus_gradient_at_zero_is_one_half():
    x = Tensor.leaf(0.0)
    (g,) = grad(x.softplus(), [x])
    assert g == pytest.approx(0.5)


def test_leaf_off_the_path_gets_zero_gradient():
    x = Tensor.leaf([1.0, 2.0])
    unused = Tensor.leaf([[1.0, 2.0], [3.0, 4.0]])
    gx, gu = grad(x.square().sum(), [x, unused])
    np.testing.assert_allclose(gx, [2.0, 4.0])
    assert gu.shape == (2, 2)
    assert not gu.any()


def test_shared_leaf_accumulates_over_paths():
    x = Tensor.leaf(2.0)
    (g,) = grad(x * x + x.exp(), [x])
    assert g == pytest.approx(4.0 + math.exp(2.0))


def test_graph_can_be_differentiated_twice():
    x = Tensor.leaf([0.5, -1.5])
    out = (x * 3.0).square().sum()
    first = grad(out, [x])
    second = grad(out, [x])
    np.testing.assert_array_equal(first[0], second[0])


def test_non_scalar_output_is_rejected():
    x = Tensor.leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        grad(x.square(), [x])


def test_non_leaf_parameter_is_rejected():
    x = Tensor.leaf(1.0)
    y = x * 2.0
    with pytest.raises(ValueError, match="leaf"):
        grad(y.square(), [y])


def test_log_of_zero_raises_non_finite():
    x = Tensor.leaf([1.0, 0.0])
    with pytest.raises(NonFiniteError):
        x.log()


def test_non_finite_adjoint_raises():
    # sqrt has an infinite slope at zero.
    x = Tensor.leaf(0.0)
    with pytest.raises(NonFiniteError):
        grad(x.sqrt(), [x])


# ── logsumexp ───────────────────────────────────────────────────────


def test_logsumexp_of_zeros():
    assert logsumexp([0.0, 0.0]).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_does_not_overflow():
    assert logsumexp([1000.0, 1000.0]).item() == pytest.approx(1000.0 + math.log(2.0))


def test_logsumexp_matches_naive_formula():
    v = np.array([0.3, -1.2, 2.0])
    assert logsumexp(v).item() == pytest.approx(math.log(np.exp(v).sum()), abs=1e-12)


def test_logsumexp_shift_invariance(rng):
    v = rng.normal(size=(8, 5))
    c = 3.7
    np.testing.assert_allclose(logsumexp(v + c).data, logsumexp(v).data + c, atol=1e-12)


def test_logsumexp_rejects_empty_input():
    with pytest.raises(ValueError, match="empty"):
        logsumexp(np.zeros((3, 0)))


# ── finite-difference agreement ─────────────────────────────────────


@pytest.mark.parametrize("seed", range(10))
def test_elementwise_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = Tensor.leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    b = Tensor.leaf(rng.normal(size=(4,)))

    def fn():
        mixed = (a * b - b / a).exp().log() + a.sqrt() * b.softplus()
        return (mixed.square() + (-a).relu() + a.clip_max(1.5)).mean()

    _check_gradient(fn, [a, b])


@pytest.mark.parametrize("seed", range(10))
def test_matmul_reshape_and_slices_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    A = Tensor.leaf(rng.normal(size=(3, 4)))
    B = Tensor.leaf(rng.normal(size=(4, 2)))
    picks = np.array([0, 2, 2])

    def fn():
        prod = A @ B
        flat = prod.reshape(6)
        return flat[1:4].sum() + prod[picks].square().sum() + logsumexp(prod, axis=0).sum()

    _check_gradient(fn, [A, B])


def test_random_two_layer_mlp_matches_finite_differences(rng):
    spec = MlpSpec(input_dim=3, hidden=(2,), output_dim=1)
    net = init_network(spec, 11)
    X = rng.normal(size=(6, 3))
    y = rng.normal(size=(6, 1))
    params = net.base_parameters()
    assert sum(p.data.size for p in params) == 11

    _check_gradient(lambda: (forward_mean(net, X) - y).square().mean(), params)
