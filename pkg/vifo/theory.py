"""Numerical checks of the output-space objective against weight-space VI.

The linear-Gaussian case is exact: a Gaussian posterior over weights
induces Gaussian outputs, and the output-space objective differs from the
ELBO by a constant. The ReLU helpers show where that stops being true.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.optimize import minimize_scalar
from scipy.special import digamma, erfc, gammaln

from .core import VariationalOutput
from .regularizers import eb_objective, eb_optimal_s

PSEUDO_THRESHOLD = 1e-10


def _is_spd(matrix: np.ndarray) -> bool:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    if not np.allclose(matrix, matrix.T, rtol=0, atol=1e-12 * max(1.0, np.abs(matrix).max())):
        return False
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


def _require_spd(name: str, matrix: np.ndarray):
    if not _is_spd(matrix):
        raise ValueError(f"{name} must be symmetric positive definite")


@dataclass(frozen=True)
class LinearInstance:
    """Bayesian linear regression; the columns of X are the data points."""

    X: np.ndarray
    Y: np.ndarray
    m0: np.ndarray
    S0: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        d, N = self.X.shape
        if N <= d:
            raise ValueError(f"Need more data points than dimensions (N={N}, d={d})")
        if self.Y.shape != (N,) or self.m0.shape != (d,):
            raise ValueError("Y must have N entries and m0 must have d entries")
        _require_spd("S0", self.S0)
        if np.linalg.matrix_rank(self.X) != d:
            raise ValueError("X must have full row rank")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]


def random_spd(d: int, rng: np.random.Generator, jitter: float = 0.5) -> np.ndarray:
    A = rng.standard_normal((d, d))
    return A @ A.T / d + jitter * np.eye(d)


def random_linear_instance(
    d: int, N: int, rng: np.random.Generator, beta: float = 2.0
) -> LinearInstance:
    X = rng.standard_normal((d, N))
    theta = rng.standard_normal(d)
    Y = theta @ X + rng.standard_normal(N) / math.sqrt(beta)
    return LinearInstance(
        X=X, Y=Y, m0=rng.standard_normal(d) * 0.5, S0=random_spd(d, rng), beta=beta
    )


def _expected_loglik(means: np.ndarray, variances: np.ndarray, inst: LinearInstance) -> float:
    beta = inst.beta
    terms = -0.5 * math.log(2 * math.pi / beta) - 0.5 * beta * (
        (inst.Y - means) ** 2 + variances
    )
    return float(terms.sum())


def expected_loglik_weights(m: np.ndarray, S: np.ndarray, inst: LinearInstance) -> float:
    """Sum over points of E_{theta ~ N(m, S)} log N(y_i | theta'x_i, 1/beta)."""
    _require_spd("S", S)
    means = m @ inst.X
    variances = np.einsum("in,ij,jn->n", inst.X, S, inst.X)
    return _expected_loglik(means, variances, inst)


def expected_loglik_outputs(w: np.ndarray, V: np.ndarray, inst: LinearInstance) -> float:
    """The same sum computed point by point from q(z|x_i) = N(w'x_i, x_i'Vx_i)."""
    _require_spd("V", V)
    means = np.empty(inst.N)
    variances = np.empty(inst.N)
    for i in range(inst.N):
        x = inst.X[:, i]
        means[i] = w @ x
        variances[i] = x @ V @ x
    return _expected_loglik(means, variances, inst)


def _gaussian_kl(m: np.ndarray, S: np.ndarray, m0: np.ndarray, S0: np.ndarray) -> float:
    d = len(m)
    S0_inv = np.linalg.inv(S0)
    diff = m - m0
    _, logdet_S = np.linalg.slogdet(S)
    _, logdet_S0 = np.linalg.slogdet(S0)
    return 0.5 * float(
        np.trace(S0_inv @ S) - d + diff @ S0_inv @ diff + logdet_S0 - logdet_S
    )


def linear_elbo(m: np.ndarray, S: np.ndarray, inst: LinearInstance) -> float:
    return expected_loglik_weights(m, S, inst) - _gaussian_kl(m, S, inst.m0, inst.S0)


def simplified_correlated_kl(w: np.ndarray, V: np.ndarray, inst: LinearInstance) -> float:
    """The d-dimensional form of the KL between the induced N-dimensional output Gaussians."""
    _require_spd("V", V)
    S0_inv = np.linalg.inv(inst.S0)
    diff = w - inst.m0
    _, logdet = np.linalg.slogdet(S0_inv @ V)
    return 0.5 * float(np.trace(S0_inv @ V) - logdet + diff @ S0_inv @ diff - inst.N)


def linear_vifo_objective(w: np.ndarray, V: np.ndarray, inst: LinearInstance) -> float:
    return expected_loglik_outputs(w, V, inst) - simplified_correlated_kl(w, V, inst)


@dataclass(frozen=True)
class CorrelatedKL:
    value: float
    trace: float
    log_pdet: float
    quadratic: float
    rank: int


def _pseudo_powers(A: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """A^+ and (A^+)^(1/2) of a symmetric PSD matrix."""
    lam, U = eigh(A)
    keep = lam > threshold * lam.max()
    Uk, lk = U[:, keep], lam[keep]
    return (Uk / lk) @ Uk.T, (Uk / np.sqrt(lk)) @ Uk.T


def correlated_kl_direct(
    w: np.ndarray, V: np.ndarray, inst: LinearInstance, threshold: float = PSEUDO_THRESHOLD
) -> CorrelatedKL:
    """KL between the rank-deficient N-dimensional output Gaussians.

    Uses pseudo-inverses and the pseudo-determinant, both taken from
    symmetric eigendecompositions with a relative eigenvalue threshold.
    """
    _require_spd("V", V)
    X = inst.X
    A = X.T @ inst.S0 @ X
    B = X.T @ V @ X
    try:
        A_pinv, A_half = _pseudo_powers(A, threshold)
        ratio = eigh(A_half @ B @ A_half, eigvals_only=True)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"Eigendecomposition failed: {e}") from e
    nonzero = ratio[ratio > threshold * ratio.max()]
    delta = X.T @ (w - inst.m0)
    trace = float(ratio.sum())
    log_pdet = float(np.log(nonzero).sum())
    quadratic = float(delta @ A_pinv @ delta)
    value = 0.5 * trace - 0.5 * log_pdet + 0.5 * quadratic - 0.5 * inst.N
    return CorrelatedKL(
        value=value, trace=trace, log_pdet=log_pdet, quadratic=quadratic, rank=len(nonzero)
    )


def objective_gap(m: np.ndarray, S: np.ndarray, inst: LinearInstance) -> float:
    """Output-space objective minus ELBO at aligned parameters (w, V) = (m, S)."""
    return linear_vifo_objective(m, S, inst) - linear_elbo(m, S, inst)


def multi_output_gap(
    instances: Sequence[LinearInstance], params: Sequence[tuple[np.ndarray, np.ndarray]]
) -> float:
    """Total gap for K independent outputs, one linear instance per output."""
    return sum(
        objective_gap(m, S, inst) for inst, (m, S) in zip(instances, params, strict=True)
    )


# ── ReLU moments ──────────────────────────────────────────────────────


def normal_cdf(x: float) -> float:
    return 0.5 * float(erfc(-x / math.sqrt(2.0)))


def normal_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def relu_moment(w_bar: float, u_bar: float, sigma_u: float, x1: float) -> float:
    """E[w * relu(u * x1)] for independent w with mean w_bar and u ~ N(u_bar, sigma_u^2)."""
    if not sigma_u > 0:
        raise ValueError("sigma_u must be positive")
    ratio = u_bar / sigma_u
    tail = normal_cdf(-ratio)
    density = normal_pdf(ratio)
    if x1 >= 0:
        return w_bar * (u_bar * (1.0 - tail) + sigma_u * density) * x1
    return w_bar * (u_bar * tail - sigma_u * density) * x1


def relu_moment_mc(
    w_bar: float,
    u_bar: float,
    sigma_u: float,
    x1: float,
    draws: int,
    rng: np.random.Generator,
    sigma_w: float = 0.5,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the same expectation."""
    w = w_bar + sigma_w * rng.standard_normal(draws)
    u = u_bar + sigma_u * rng.standard_normal(draws)
    values = w * np.maximum(0.0, u * x1)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(draws))


@dataclass(frozen=True)
class ReluWitness:
    positive_moment: float
    negative_moment: float
    cases_checked: int
    reproducible: bool


def relu_witness(
    u_values: Sequence[float] = (-2.0, -0.5, 0.0, 0.5, 2.0),
    w_values: Sequence[float] = (-1.0, 0.5, 1.0, 3.0),
) -> ReluWitness:
    """Random-weight moments that no deterministic single ReLU unit reproduces.

    With u ~ N(0, 1) the expected output is positive at both x1 = 1 and
    x1 = -1, while w * relu(u * x1) for fixed u vanishes on at least one
    side whatever the sign of u.
    """
    positive = relu_moment(1.0, 0.0, 1.0, 1.0)
    negative = relu_moment(1.0, 0.0, 1.0, -1.0)
    reproducible = False
    cases = 0
    for u in u_values:
        for w in w_values:
            cases += 1
            at_pos = w * max(0.0, u * 1.0)
            at_neg = w * max(0.0, u * -1.0)
            if at_pos > 0 and at_neg > 0:
                reproducible = True
    return ReluWitness(
        positive_moment=positive,
        negative_moment=negative,
        cases_checked=cases,
        reproducible=reproducible,
    )


# ── collapsed priors: direct objectives ───────────────────────────────


def collapsed_mean_posterior(
    q: VariationalOutput, gamma: float, alpha: float
) -> tuple[np.ndarray, float]:
    """Optimal q(mu_p) = N(alpha / (alpha + gamma) * mu_q, alpha gamma / (alpha + gamma))."""
    weight = alpha / (alpha + gamma)
    return weight * q.mu.data, gamma * weight


def collapsed_objective_direct(
    q: VariationalOutput,
    gamma: float,
    alpha: float,
    m_tilde: np.ndarray,
    v_tilde: float | np.ndarray,
) -> float | np.ndarray:
    """E_{N(m~, v~)}[KL(q || N(mu_p, gamma I))] + KL(N(m~, v~ I) || N(0, alpha I))."""
    mu, s2 = q.mu.data, q.sigma2.data
    v_tilde = np.broadcast_to(np.asarray(v_tilde, dtype=np.float64), mu.shape)
    if np.any(v_tilde <= 0):
        raise ValueError("Candidate variance must be positive")
    expected_kl = 0.5 * (
        s2 / gamma + ((mu - m_tilde) ** 2 + v_tilde) / gamma - 1.0 + math.log(gamma) - np.log(s2)
    )
    prior_kl = 0.5 * (
        v_tilde / alpha + np.asarray(m_tilde) ** 2 / alpha - 1.0 + math.log(alpha) - np.log(v_tilde)
    )
    return _value((expected_kl + prior_kl).sum(axis=-1))


def collapsed_mv_plugin(
    q: VariationalOutput, alpha: float, beta: float, delta: float
) -> float | np.ndarray:
    """Both regularizer terms at the optimal normal-inverse-gamma posterior.

    Computed from the posterior's expectations (digamma, log-gamma), not from
    the collapsed formula; equals reg_collapsed_mv plus collapsed_mv_constant.
    """
    mu, s2 = q.mu.data, q.sigma2.data
    b_post = beta + 0.5 * delta * mu**2 + 0.5 * s2
    return _value(_mv_plugin_terms(mu, s2, alpha, beta, delta, b_post).sum(axis=-1))


def collapsed_mv_all_plugin(q: VariationalOutput, alpha: float, beta: float, delta: float) -> float:
    """The batch version: one normal-inverse-gamma posterior per output shared by all rows.

    Its rate comes from the batch means of mu**2 and sigma2; equals reg_mv_all
    plus mv_all_constant.
    """
    mu, s2 = q.mu.data, q.sigma2.data
    b_post = beta + 0.5 * delta * np.mean(mu**2, axis=0) + 0.5 * np.mean(s2, axis=0)
    return float(_mv_plugin_terms(mu, s2, alpha, beta, delta, b_post).sum())


def _mv_plugin_terms(
    mu: np.ndarray, s2: np.ndarray, alpha: float, beta: float, delta: float, b_post: np.ndarray
) -> np.ndarray:
    t = delta / (1.0 - delta)
    a_post = alpha + 0.5
    inv_var = a_post / b_post
    log_var = np.log(b_post) - digamma(a_post)

    expected_kl = 0.5 * (
        log_var - np.log(s2) - 1.0 + s2 * inv_var + (t * mu / (t + 1.0)) ** 2 * inv_var
        + 1.0 / (t + 1.0)
    )
    mean_kl = 0.5 * (
        t / (t + 1.0) - 1.0 + math.log((t + 1.0) / t) + t * mu**2 / (t + 1.0) ** 2 * inv_var
    )
    variance_kl = (
        (a_post - alpha) * digamma(a_post)
        - gammaln(a_post)
        + gammaln(alpha)
        + alpha * (np.log(b_post) - math.log(beta))
        + a_post * (beta - b_post) / b_post
    )
    return expected_kl + mean_kl + variance_kl


def eb_optimal_s_numeric(q: VariationalOutput, alpha: float, beta: float) -> float:
    """Golden-section search for the minimiser of eb_objective over s (one example)."""
    if q.mu.ndim != 1:
        raise ValueError("The numeric search works on one example at a time")
    guess = float(eb_optimal_s(q, alpha, beta).data)

    def objective(log_s: float) -> float:
        return float(eb_objective(q, math.exp(log_s), alpha, beta).data)

    center = math.log(guess)
    result = minimize_scalar(
        objective, bracket=(center - 2.0, center + 0.5, center + 3.0), method="golden", tol=1e-10
    )
    return math.exp(result.x)


def _value(array: np.ndarray) -> float | np.ndarray:
    return float(array) if np.ndim(array) == 0 else array
