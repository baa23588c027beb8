import math

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import logsumexp as np_logsumexp
from scipy.special import softmax

from vifo.autodiff import Tensor, grad, numeric_grad, relative_error
from vifo.core import (
    LOG_2PI,
    CategoricalPrediction,
    RegressionHead,
    RegressionPrediction,
    VariationalOutput,
    draw_noise,
    ensemble_predict,
    ensemble_regression,
    mc_nll_classification,
    mc_nll_regression,
    predictive_classification,
    predictive_classification_closed_form,
    predictive_regression,
    predictive_regression_closed_form,
    predictive_regression_mc,
    sample_z,
)
from vifo.networks import Link

TINY = 1e-30


def _gauss_hermite_2d(fn, mu, sigma2, order=60):
    """E[fn(z0, z1)] for independent Gaussian coordinates."""
    nodes, weights = hermegauss(order)
    weights = weights / weights.sum()
    z0 = mu[0] + math.sqrt(sigma2[0]) * nodes[:, None]
    z1 = mu[1] + math.sqrt(sigma2[1]) * nodes[None, :]
    return float((weights[:, None] * weights[None, :] * fn(z0, z1)).sum())


def _within(sample_mean, reference, values, k=3.0):
    se = np.std(values, ddof=1) / math.sqrt(len(values))
    assert abs(sample_mean - reference) <= k * se


# ── types ───────────────────────────────────────────────────────────


def test_variational_output_rejects_bad_shapes_and_variances():
    with pytest.raises(ValueError, match="differ"):
        VariationalOutput.of(np.zeros(3), np.ones(2))
    with pytest.raises(ValueError, match="positive"):
        VariationalOutput.of(np.zeros(2), [1.0, 0.0])


def test_categorical_prediction_checks_the_simplex():
    with pytest.raises(ValueError, match="sum to 1"):
        CategoricalPrediction(np.array([0.5, 0.6]))
    pred = CategoricalPrediction(np.array([0.2, 0.8]))
    assert pred.probs.shape == (1, 2)
    assert pred.labels.tolist() == [1]


def test_regression_head_from_output_splits_columns():
    q = VariationalOutput.of([[1.0, 2.0]], [[3.0, 4.0]])
    head = RegressionHead.from_output(q)
    assert head.mu_m.data.tolist() == [1.0]
    assert head.sigma2_l.data.tolist() == [4.0]
    with pytest.raises(ValueError, match="K == 2"):
        RegressionHead.from_output(VariationalOutput.of([[1.0]], [[1.0]]))


# ── sampling ────────────────────────────────────────────────────────


def test_degenerate_samples_equal_the_mean(rng):
    q = VariationalOutput.of([0.5, -2.0], [TINY, TINY])
    z = sample_z(q, 50, rng)
    np.testing.assert_allclose(z.data, np.broadcast_to(q.mu.data, (50, 2)), atol=1e-12)


def test_sample_moments(rng):
    M = 200_000
    q = VariationalOutput.of([0.0], [4.0])
    z = sample_z(q, M, rng).data[:, 0]
    assert abs(z.mean()) <= 3 * 2.0 / math.sqrt(M)
    # Var of the sample variance of a normal is 2 sigma^4 / (M - 1).
    assert abs(z.var(ddof=1) - 4.0) <= 3 * math.sqrt(2 * 16.0 / (M - 1))


def test_same_seed_same_draws():
    q = VariationalOutput.of([1.0, 2.0], [0.5, 0.5])
    a = sample_z(q, 4, np.random.default_rng(5)).data
    b = sample_z(q, 4, np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)


def test_draw_noise_rejects_zero_samples(rng):
    with pytest.raises(ValueError, match="at least one"):
        draw_noise(rng, 0, (2,))


# ── classification loss ─────────────────────────────────────────────


def test_classification_nll_of_degenerate_uniform_logits(rng):
    q = VariationalOutput.of([0.0, 0.0], [TINY, TINY])
    assert mc_nll_classification(q, 0, 5, rng).item() == pytest.approx(math.log(2.0))


def test_classification_nll_matches_cross_entropy_as_variance_vanishes(rng):
    mu = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    q = VariationalOutput.of(mu, np.full(mu.shape, TINY))
    expected = np_logsumexp(mu, axis=-1) - mu[np.arange(4), y]
    np.testing.assert_allclose(mc_nll_classification(q, y, 3, rng).data, expected, atol=1e-6)


def test_classification_nll_matches_quadrature():
    rng = np.random.default_rng(1)
    mu, sigma2 = np.array([1.0, 0.0]), np.array([1.0, 1.0])
    q = VariationalOutput.of(mu, sigma2)
    M = 100_000
    eps = draw_noise(rng, M, (2,))
    z = mu + np.sqrt(sigma2) * eps
    values = np_logsumexp(z, axis=-1) - z[:, 0]
    reference = _gauss_hermite_2d(lambda a, b: np.logaddexp(a, b) - a, mu, sigma2)
    estimate = mc_nll_classification(q, 0, M, rng, eps).item()
    _within(estimate, reference, values)


def test_classification_nll_is_shift_invariant(rng):
    q = VariationalOutput.of([0.4, -0.3], [0.7, 0.7])
    shifted = VariationalOutput.of([2.4, 1.7], [0.7, 0.7])
    eps = draw_noise(rng, 20, (2,))
    assert mc_nll_classification(q, 1, 20, rng, eps).item() == pytest.approx(
        mc_nll_classification(shifted, 1, 20, rng, eps).item(), abs=1e-12
    )


def test_reparametrized_gradient_matches_finite_differences(rng):
    mu = Tensor.leaf(rng.normal(size=(3, 4)))
    sigma2 = Tensor.leaf(rng.uniform(0.2, 1.5, size=(3, 4)))
    y = np.array([0, 3, 1])
    eps = draw_noise(rng, 6, (3, 4))

    def fn():
        return mc_nll_classification(VariationalOutput(mu, sigma2), y, 6, rng, eps).mean()

    analytic = grad(fn(), [mu, sigma2])
    numeric = numeric_grad(lambda: fn().item(), [mu, sigma2])
    assert relative_error(analytic, numeric) < 1e-5


def test_invalid_labels_are_rejected(rng):
    q = VariationalOutput.of([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError, match="lie in"):
        mc_nll_classification(q, 2, 3, rng)


# ── regression loss ─────────────────────────────────────────────────


def _degenerate_head(m, l):
    return RegressionHead.of([m], [TINY], [l], [TINY])


def test_regression_nll_at_the_target(rng):
    value = mc_nll_regression(_degenerate_head(0.3, 0.0), [0.3], 4, rng, Link(kind="exp")).data[0]
    assert value == pytest.approx(0.5 * LOG_2PI)


def test_regression_nll_one_unit_off(rng):
    value = mc_nll_regression(_degenerate_head(1.3, 0.0), [0.3], 4, rng, Link(kind="exp")).data[0]
    assert value == pytest.approx(0.5 * LOG_2PI + 0.5)


def test_regression_nll_matches_quadrature():
    rng = np.random.default_rng(2)
    mu, sigma2, y = np.array([0.2, -0.4]), np.array([0.3, 0.2]), 0.7
    head = RegressionHead.of([mu[0]], [sigma2[0]], [mu[1]], [sigma2[1]])
    M = 100_000
    eps = np.moveaxis(draw_noise(rng, M, (2, 1)), 1, 0)
    m = mu[0] + math.sqrt(sigma2[0]) * eps[0, :, 0]
    l = mu[1] + math.sqrt(sigma2[1]) * eps[1, :, 0]
    values = 0.5 * (LOG_2PI + l) + (y - m) ** 2 / (2 * np.exp(l))

    def nll(a, b):
        return 0.5 * (LOG_2PI + b) + (y - a) ** 2 / (2 * np.exp(b))

    reference = _gauss_hermite_2d(nll, mu, sigma2)
    estimate = mc_nll_regression(head, [y], M, rng, Link(kind="exp"), eps).data[0]
    _within(estimate, reference, values)


# ── predictives ─────────────────────────────────────────────────────


def test_predictive_classification_of_degenerate_q_is_softmax(rng):
    mu = rng.normal(size=(5, 3))
    q = VariationalOutput.of(mu, np.full(mu.shape, TINY))
    np.testing.assert_allclose(
        predictive_classification(q, 10, rng).probs, softmax(mu, axis=-1), atol=1e-12
    )


def test_predictive_classification_is_symmetric(rng):
    q = VariationalOutput.of([0.0, 0.0], [2.0, 2.0])
    probs = predictive_classification(q, 20_000, rng).probs[0]
    assert probs[0] == pytest.approx(0.5, abs=0.01)


def test_predictive_classification_matches_quadrature():
    rng = np.random.default_rng(4)
    mu, sigma2 = np.array([1.0, 0.0]), np.array([1.0, 1.0])
    M = 100_000
    eps = draw_noise(rng, M, (2,))
    z = mu + eps
    values = softmax(z, axis=-1)[:, 0]
    reference = _gauss_hermite_2d(lambda a, b: 1.0 / (1.0 + np.exp(b - a)), mu, sigma2)
    probs = predictive_classification(VariationalOutput.of(mu, sigma2), M, rng, eps).probs
    _within(probs[0, 0], reference, values)


def test_predictive_sums_to_one(rng, output):
    probs = predictive_classification(output, 7, rng).probs
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)


def test_closed_form_classification_limits():
    mu = np.array([[2.0, -1.0, 0.5]])
    q = VariationalOutput.of(mu, np.full(mu.shape, TINY))
    np.testing.assert_allclose(
        predictive_classification_closed_form(q).probs, softmax(mu, axis=-1), atol=1e-12
    )
    wide = VariationalOutput.of(mu, np.full(mu.shape, 1e6))
    np.testing.assert_allclose(predictive_classification_closed_form(wide).probs, 1 / 3, atol=1e-2)


def test_closed_form_regression_variance():
    head = RegressionHead.of([0.0], [1.0], [0.0], [2.0])
    pred = predictive_regression_closed_form(head, Link(kind="exp"))
    assert pred.variance[0] == pytest.approx(1.0 + math.e)
    degenerate = predictive_regression_closed_form(
        RegressionHead.of([0.0], [TINY], [0.7], [TINY]), Link(kind="exp")
    )
    assert degenerate.variance[0] == pytest.approx(math.exp(0.7))


def test_closed_form_regression_needs_exp_link():
    head = RegressionHead.of([0.0], [1.0], [0.0], [1.0])
    with pytest.raises(ValueError, match="exp link"):
        predictive_regression_closed_form(head, Link(kind="softplus"))


@pytest.mark.parametrize("seed", range(5))
def test_closed_form_regression_variance_matches_mc(seed):
    rng = np.random.default_rng(seed)
    head = RegressionHead.of(
        rng.normal(size=1), rng.uniform(0.1, 1.0, 1), rng.normal(size=1), rng.uniform(0.1, 0.5, 1)
    )
    M = 200_000
    m = head.mu_m.data + np.sqrt(head.sigma2_m.data) * rng.standard_normal(M)
    l = head.mu_l.data + np.sqrt(head.sigma2_l.data) * rng.standard_normal(M)
    y = m + np.exp(l / 2) * rng.standard_normal(M)
    closed = predictive_regression_closed_form(head, Link(kind="exp")).variance[0]
    # The sample variance's standard error, from the fourth central moment.
    centred = y - y.mean()
    se = math.sqrt((np.mean(centred**4) - np.mean(centred**2) ** 2) / M)
    assert abs(y.var(ddof=1) - closed) <= 4 * se


def test_predictive_regression_falls_back_to_mc_for_other_links(rng):
    head = RegressionHead.of([0.5], [TINY], [0.0], [TINY])
    pred = predictive_regression(head, Link(kind="softplus"), 50, rng)
    assert pred.mean[0] == pytest.approx(0.5)
    assert pred.variance[0] == pytest.approx(math.log(2.0))
    mc = predictive_regression_mc(head, Link(kind="exp"), 50, rng)
    assert mc.variance[0] == pytest.approx(1.0)


# ── ensembles ───────────────────────────────────────────────────────


def test_ensemble_of_identical_members():
    member = CategoricalPrediction(np.array([[0.1, 0.9], [0.6, 0.4]]))
    np.testing.assert_allclose(ensemble_predict([member, member]).probs, member.probs)


def test_ensemble_averages_probabilities():
    pred = ensemble_predict(
        [CategoricalPrediction(np.array([1.0, 0.0])), CategoricalPrediction(np.array([0.0, 1.0]))]
    )
    np.testing.assert_allclose(pred.probs, [[0.5, 0.5]])


def test_ensemble_nll_is_below_mean_member_nll(rng):
    labels = rng.integers(0, 4, size=30)
    members = [CategoricalPrediction(softmax(rng.normal(size=(30, 4)), axis=-1)) for _ in range(5)]

    def nll(pred):
        return -np.log(pred.probs[np.arange(30), labels]).mean()

    assert nll(ensemble_predict(members)) <= np.mean([nll(m) for m in members])


def test_ensemble_rejects_empty_and_mismatched_members():
    with pytest.raises(ValueError, match="at least one"):
        ensemble_predict([])
    with pytest.raises(ValueError, match="disagree"):
        ensemble_predict(
            [CategoricalPrediction(np.array([1.0, 0.0])), CategoricalPrediction(np.ones(3) / 3)]
        )


def test_regression_ensemble_matches_mixture_moments():
    a = RegressionPrediction(mean=np.array([0.0]), variance=np.array([1.0]))
    b = RegressionPrediction(mean=np.array([2.0]), variance=np.array([3.0]))
    mixed = ensemble_regression([a, b])
    assert mixed.mean[0] == pytest.approx(1.0)
    assert mixed.variance[0] == pytest.approx(2.0 + 1.0)


def test_regression_ensemble_of_agreeing_members_has_no_negative_variance():
    mean = np.linspace(0.1, 1000.0, 1001) / 7.0
    member = RegressionPrediction(mean=mean, variance=np.zeros_like(mean))
    mixed = ensemble_regression([member, member, member])
    assert np.all(mixed.variance >= 0.0)
    assert np.all(mixed.variance <= 1e-9)
