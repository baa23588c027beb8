"""The output distribution q(z|x), its Monte-Carlo losses and predictives.

Every function works on a single example (vectors of length K) or on a
batch (arrays of shape [B, K]); the class axis is always the last one.
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Self

import numpy as np
from scipy.special import softmax

from .autodiff import ArrayLike, Tensor, as_tensor, logsumexp
from .networks import Link, link_apply

LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class VariationalOutput:
    mu: Tensor
    sigma2: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma2.shape:
            raise ValueError(f"mu {self.mu.shape} and sigma2 {self.sigma2.shape} differ in shape")
        if self.mu.ndim not in (1, 2) or self.mu.shape[-1] < 1:
            raise ValueError(f"Expected shape [K] or [B, K] with K >= 1, got {self.mu.shape}")
        if not np.all(self.sigma2.data > 0):
            raise ValueError("sigma2 must be strictly positive")

    @classmethod
    def of(cls, mu: ArrayLike, sigma2: ArrayLike) -> Self:
        return cls(as_tensor(mu), as_tensor(sigma2))

    @property
    def K(self) -> int:
        return self.mu.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape


@dataclass(frozen=True)
class RegressionHead:
    """Location output m and scale logit l, each with its own Gaussian."""

    mu_m: Tensor
    sigma2_m: Tensor
    mu_l: Tensor
    sigma2_l: Tensor

    def __post_init__(self):
        if not (np.all(self.sigma2_m.data > 0) and np.all(self.sigma2_l.data > 0)):
            raise ValueError("sigma2_m and sigma2_l must be strictly positive")

    @classmethod
    def of(cls, mu_m: ArrayLike, sigma2_m: ArrayLike, mu_l: ArrayLike, sigma2_l: ArrayLike) -> Self:
        return cls(as_tensor(mu_m), as_tensor(sigma2_m), as_tensor(mu_l), as_tensor(sigma2_l))

    @classmethod
    def from_output(cls, q: VariationalOutput) -> Self:
        """Column 0 is m, column 1 is l."""
        if q.K != 2:
            raise ValueError(f"A regression head needs K == 2 outputs, got {q.K}")
        return cls(q.mu[..., 0], q.sigma2[..., 0], q.mu[..., 1], q.sigma2[..., 1])


@dataclass(frozen=True)
class CategoricalPrediction:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        if np.any(probs < 0) or not np.allclose(probs.sum(axis=-1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("Probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", probs)

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-1]

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=-1)

    @property
    def labels(self) -> np.ndarray:
        return self.probs.argmax(axis=-1)


@dataclass(frozen=True)
class RegressionPrediction:
    mean: np.ndarray
    variance: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def draw_noise(rng: np.random.Generator, M: int, shape: tuple[int, ...]) -> np.ndarray:
    if M < 1:
        raise ValueError(f"Need at least one Monte-Carlo sample, got M={M}")
    return rng.standard_normal((M, *shape))


def sample_z(
    q: VariationalOutput, M: int, rng: np.random.Generator, eps: np.ndarray | None = None
) -> Tensor:
    """Reparametrised draws mu + sqrt(sigma2) * eps, shape [M, *q.shape]."""
    if eps is None:
        eps = draw_noise(rng, M, q.shape)
    return q.mu + q.sigma2.sqrt() * eps


def one_hot(y: ArrayLike, K: int) -> np.ndarray:
    y = np.asarray(y)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("Class labels must be integers")
    if np.any(y < 0) or np.any(y >= K):
        raise ValueError(f"Class labels must lie in [0, {K})")
    return np.eye(K)[y]


def mc_nll_classification(
    q: VariationalOutput,
    y: ArrayLike,
    M: int,
    rng: np.random.Generator,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Monte-Carlo estimate of E_q[-log softmax(z)_y], one value per example."""
    onehot = one_hot(y, q.K)
    z = sample_z(q, M, rng, eps)
    nll = logsumexp(z, axis=-1) - (z * onehot).sum(axis=-1)
    return nll.mean(axis=0)


def _gaussian_nll(y: ArrayLike, m: Tensor, variance: Tensor) -> Tensor:
    return 0.5 * (LOG_2PI + variance.log()) + (y - m).square() / (2.0 * variance)


def mc_nll_regression(
    h: RegressionHead,
    y: ArrayLike,
    M: int,
    rng: np.random.Generator,
    link: Link,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Sample m and l, then average the Gaussian NLL of y under N(m, g(l))."""
    if eps is None:
        eps = draw_noise(rng, M, (2, *h.mu_m.shape))
        eps = np.moveaxis(eps, 1, 0)
    m = h.mu_m + h.sigma2_m.sqrt() * eps[0]
    l = h.mu_l + h.sigma2_l.sqrt() * eps[1]
    return _gaussian_nll(np.asarray(y, dtype=np.float64), m, link(l)).mean(axis=0)


def predictive_classification(
    q: VariationalOutput, M: int, rng: np.random.Generator, eps: np.ndarray | None = None
) -> CategoricalPrediction:
    """E_q[softmax(z)] by Monte Carlo."""
    if eps is None:
        eps = draw_noise(rng, M, q.shape)
    z = q.mu.data + np.sqrt(q.sigma2.data) * eps
    probs = softmax(z, axis=-1).mean(axis=0)
    return CategoricalPrediction(probs / probs.sum(axis=-1, keepdims=True))


def predictive_classification_closed_form(q: VariationalOutput) -> CategoricalPrediction:
    """Deterministic approximation softmax(mu / sqrt(1 + pi * sigma2 / 8)).

    Reduces to softmax(mu) as sigma2 goes to zero.
    """
    scaled = q.mu.data / np.sqrt(1.0 + math.pi * q.sigma2.data / 8.0)
    return CategoricalPrediction(softmax(scaled, axis=-1))


def _require_exp(link: Link):
    if link.kind != "exp":
        raise ValueError(f"The closed-form predictive needs the exp link, got {link.kind}")


def predictive_regression_closed_form(h: RegressionHead, link: Link) -> RegressionPrediction:
    """N(mu_m, sigma2_m + exp(mu_l + sigma2_l / 2)) under the exp link."""
    _require_exp(link)
    mean = h.mu_m.data
    variance = h.sigma2_m.data + np.exp(h.mu_l.data + h.sigma2_l.data / 2.0)
    return RegressionPrediction(mean=np.array(mean), variance=np.array(variance))


def predictive_regression_mc(
    h: RegressionHead, link: Link, M: int, rng: np.random.Generator
) -> RegressionPrediction:
    """Moments of p(y|x) from M draws of (m, l), by the law of total variance."""
    eps = draw_noise(rng, M, (2, *h.mu_m.shape))
    m = h.mu_m.data + np.sqrt(h.sigma2_m.data) * eps[:, 0]
    l = h.mu_l.data + np.sqrt(h.sigma2_l.data) * eps[:, 1]
    noise = np.asarray(link_apply(link, l))
    return RegressionPrediction(mean=m.mean(axis=0), variance=noise.mean(axis=0) + m.var(axis=0))


def predictive_regression(
    h: RegressionHead, link: Link, M: int, rng: np.random.Generator
) -> RegressionPrediction:
    if link.kind == "exp":
        return predictive_regression_closed_form(h, link)
    return predictive_regression_mc(h, link, M, rng)


def ensemble_predict(members: Sequence[CategoricalPrediction]) -> CategoricalPrediction:
    if not members:
        raise ValueError("An ensemble needs at least one member")
    shapes = {member.probs.shape for member in members}
    if len(shapes) != 1:
        raise ValueError(f"Ensemble members disagree on shape: {sorted(shapes)}")
    probs = np.mean([member.probs for member in members], axis=0)
    return CategoricalPrediction(probs / probs.sum(axis=-1, keepdims=True))


def ensemble_regression(members: Sequence[RegressionPrediction]) -> RegressionPrediction:
    """Moment-matched Gaussian of an equal-weight mixture."""
    if not members:
        raise ValueError("An ensemble needs at least one member")
    means = np.array([member.mean for member in members])
    second = np.array([member.variance + member.mean**2 for member in members])
    mean = means.mean(axis=0)
    variance = np.maximum(second.mean(axis=0) - mean**2, 0.0)
    return RegressionPrediction(mean=mean, variance=variance)
