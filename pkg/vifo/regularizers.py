"""Closed-form regularizers on q(z|x) and the full training objective.

Per-example regularizers reduce over the last axis, so a batch of shape
[B, K] yields B values. The ``*_all`` variants share their prior statistics
across the whole batch and return one number for it.
"""

import math
from dataclasses import asdict, dataclass
from typing import Any, ClassVar

import numpy as np
from scipy.special import gammaln

from .autodiff import Tensor
from .core import RegressionHead, VariationalOutput, mc_nll_classification, mc_nll_regression
from .networks import Network, forward_heads


def _require_positive(**values: float):
    for name, value in values.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True, kw_only=True)
class Naive:
    kind: ClassVar[str] = "naive"
    mu_p: float | tuple[float, ...] = 0.0
    v: float = 1.0

    def __post_init__(self):
        _require_positive(v=self.v)


@dataclass(frozen=True, kw_only=True)
class CollapsedMean:
    kind: ClassVar[str] = "mean"
    gamma: float = 0.3
    alpha: float = 5.7

    def __post_init__(self):
        _require_positive(gamma=self.gamma, alpha=self.alpha)

    @classmethod
    def from_ratio(cls, gamma: float, ratio: float) -> "CollapsedMean":
        """Build alpha from gamma and the shrinkage gamma / (alpha + gamma)."""
        if not 0 < ratio < 1:
            raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
        return cls(gamma=gamma, alpha=gamma / ratio - gamma)


@dataclass(frozen=True, kw_only=True)
class CollapsedMV:
    kind: ClassVar[str] = "mv"
    alpha: float = 0.5
    beta: float = 0.01
    delta: float = 0.1

    def __post_init__(self):
        _require_positive(alpha=self.alpha, beta=self.beta)
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True, kw_only=True)
class EmpiricalBayes:
    kind: ClassVar[str] = "eb"
    alpha: float = 4.4798
    beta: float = 10.0

    def __post_init__(self):
        _require_positive(alpha=self.alpha, beta=self.beta)


@dataclass(frozen=True, kw_only=True)
class MeanAll(CollapsedMean):
    kind: ClassVar[str] = "mean_all"


@dataclass(frozen=True, kw_only=True)
class MVAll(CollapsedMV):
    kind: ClassVar[str] = "mv_all"


@dataclass(frozen=True, kw_only=True)
class EBAll(EmpiricalBayes):
    kind: ClassVar[str] = "eb_all"


type PriorSpec = Naive | CollapsedMean | CollapsedMV | EmpiricalBayes | MeanAll | MVAll | EBAll

PRIOR_KINDS: dict[str, type] = {
    cls.kind: cls
    for cls in (Naive, CollapsedMean, CollapsedMV, EmpiricalBayes, MeanAll, MVAll, EBAll)
}
BATCH_PRIORS = (MeanAll, MVAll, EBAll)


def _parameter(value: Any) -> float | tuple[float, ...]:
    if isinstance(value, list | tuple):
        return tuple(float(v) for v in value)
    return float(value)


def prior_from_mapping(data: dict[str, Any]) -> PriorSpec:
    data = dict(data)
    kind = data.pop("kind", None)
    if kind not in PRIOR_KINDS:
        raise ValueError(f"Unknown prior kind {kind!r}; expected one of {', '.join(PRIOR_KINDS)}")
    cls = PRIOR_KINDS[kind]
    try:
        return cls(**{key: _parameter(value) for key, value in data.items()})
    except TypeError as e:
        raise ValueError(f"Bad parameters for prior {kind!r}: {e}") from None


def prior_to_mapping(prior: PriorSpec) -> dict[str, Any]:
    return {"kind": prior.kind, **asdict(prior)}


# ── per-example regularizers ──────────────────────────────────────────


def kl_naive(
    q: VariationalOutput, mu_p: float | tuple[float, ...] | np.ndarray = 0.0, v: float = 1.0
) -> Tensor:
    """KL(q || N(mu_p, v I))."""
    _require_positive(v=v)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    terms = q.sigma2 / v + (q.mu - mu_p).square() / v - 1.0 + math.log(v) - q.sigma2.log()
    return 0.5 * terms.sum(axis=-1)


def reg_collapsed_mean(q: VariationalOutput, gamma: float, alpha: float) -> Tensor:
    """Prior mean integrated out: the mean penalty shrinks by gamma / (gamma + alpha)."""
    _require_positive(gamma=gamma, alpha=alpha)
    K = q.K
    shrink = gamma / (gamma + alpha)
    quad = q.sigma2.sum(axis=-1) + shrink * q.mu.square().sum(axis=-1)
    return (
        quad / (2.0 * gamma)
        - 0.5 * q.sigma2.log().sum(axis=-1)
        + 0.5 * K * math.log(gamma + alpha)
        - 0.5 * K
    )


def reg_collapsed_mv(q: VariationalOutput, alpha: float, beta: float, delta: float) -> Tensor:
    """Prior mean and variance integrated out, without the constant terms."""
    _require_positive(alpha=alpha, beta=beta)
    inner = beta + 0.5 * delta * q.mu.square() + 0.5 * q.sigma2
    return (alpha + 0.5) * inner.log().sum(axis=-1) - 0.5 * q.sigma2.log().sum(axis=-1)


def collapsed_mv_constant(K: int, alpha: float, beta: float, delta: float) -> float:
    """What reg_collapsed_mv leaves out for one example."""
    per_dim = (
        gammaln(alpha) - gammaln(alpha + 0.5) - alpha * math.log(beta) - 0.5 * math.log(delta) - 0.5
    )
    return float(K * per_dim)


def _sum_of_moments(q: VariationalOutput) -> Tensor:
    return q.mu.square().sum(axis=-1) + q.sigma2.sum(axis=-1)


def eb_optimal_s(q: VariationalOutput, alpha: float, beta: float) -> Tensor:
    """Optimal shared prior variance (mu'mu + 1'sigma2 + 2 beta) / (K + 2 alpha + 2)."""
    _require_positive(alpha=alpha, beta=beta)
    return (_sum_of_moments(q) + 2.0 * beta) / (q.K + 2.0 * alpha + 2.0)


def eb_objective(q: VariationalOutput, s: float | Tensor, alpha: float, beta: float) -> Tensor:
    """KL(q || N(0, s I)) plus the inverse-gamma prior terms (alpha + 1) log s + beta / s."""
    K = q.K
    moments = _sum_of_moments(q)
    if isinstance(s, Tensor):
        log_s = s.log()
    else:
        _require_positive(s=s)
        log_s = math.log(s)
    kl = 0.5 * (K * log_s - q.sigma2.log().sum(axis=-1) - K + moments / s)
    return kl + (alpha + 1.0) * log_s + beta / s


def reg_eb(q: VariationalOutput, alpha: float, beta: float) -> Tensor:
    """KL(q || N(0, s* I)) with s* from eb_optimal_s; the prior terms are left out."""
    K = q.K
    moments = _sum_of_moments(q)
    s = eb_optimal_s(q, alpha, beta)
    return (
        0.5 * (K * s.log() - q.sigma2.log().sum(axis=-1))
        - 0.5 * K
        + 0.5 * (K + 2.0 * alpha + 2.0) * moments / (moments + 2.0 * beta)
    )


# ── batch-shared regularizers ─────────────────────────────────────────


def _batch(q: VariationalOutput) -> int:
    if q.mu.ndim != 2 or q.shape[0] == 0:
        raise ValueError("Batch regularizers need a non-empty batch of shape [N, K]")
    return q.shape[0]


def reg_mean_all(q: VariationalOutput, gamma: float, alpha: float) -> Tensor:
    N = _batch(q)
    _require_positive(gamma=gamma, alpha=alpha)
    K = q.K
    per_x = (q.sigma2.sum(axis=-1) + q.mu.square().sum(axis=-1)) / (2.0 * gamma) - 0.5 * (
        q.sigma2.log().sum(axis=-1)
    )
    mu_bar = q.mu.mean(axis=0)
    return (
        per_x.sum()
        - 0.5 * N * (1.0 / gamma - 1.0 / (alpha + gamma)) * mu_bar.square().sum()
        + 0.5 * N * K * math.log(alpha + gamma)
        - 0.5 * N * K
    )


def reg_mv_all(q: VariationalOutput, alpha: float, beta: float, delta: float) -> Tensor:
    """Uses the root-mean-square mean and standard deviation over the batch."""
    N = _batch(q)
    _require_positive(alpha=alpha, beta=beta)
    mu_tilde2 = q.mu.square().mean(axis=0)
    sigma_tilde2 = q.sigma2.mean(axis=0)
    inner = beta + 0.5 * delta * mu_tilde2 + 0.5 * sigma_tilde2
    return (alpha + 0.5) * N * inner.log().sum() - 0.5 * q.sigma2.log().sum()


def mv_all_constant(N: int, K: int, alpha: float, beta: float, delta: float) -> float:
    """Parameter-independent terms dropped from reg_mv_all."""
    return N * collapsed_mv_constant(K, alpha, beta, delta)


def reg_eb_all(q: VariationalOutput, alpha: float, beta: float) -> Tensor:
    N = _batch(q)
    _require_positive(alpha=alpha, beta=beta)
    K = q.K
    moments = _sum_of_moments(q)
    shared = moments.mean() + 2.0 * beta
    s_all = shared / (K + 2.0 * alpha + 2.0)
    return (
        0.5 * N * K * s_all.log()
        - 0.5 * q.sigma2.log().sum()
        - 0.5 * N * K
        + 0.5 * (K + 2.0 * alpha + 2.0) * moments.sum() / shared
    )


def regularizer(q: VariationalOutput, prior: PriorSpec) -> Tensor:
    """Mean per-example regularizer of a batch under ``prior``."""
    match prior:
        case MeanAll():
            return reg_mean_all(q, prior.gamma, prior.alpha) / _batch(q)
        case MVAll():
            return reg_mv_all(q, prior.alpha, prior.beta, prior.delta) / _batch(q)
        case EBAll():
            return reg_eb_all(q, prior.alpha, prior.beta) / _batch(q)
        case Naive():
            values = kl_naive(q, prior.mu_p, prior.v)
        case CollapsedMean():
            values = reg_collapsed_mean(q, prior.gamma, prior.alpha)
        case CollapsedMV():
            values = reg_collapsed_mv(q, prior.alpha, prior.beta, prior.delta)
        case EmpiricalBayes():
            values = reg_eb(q, prior.alpha, prior.beta)
        case _:
            raise ValueError(f"Unknown prior {prior!r}")
    return values.mean() if values.ndim else values


def sample_prior_z(
    q: VariationalOutput, prior: PriorSpec, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Draws from the prior over z implied by ``prior`` at the inputs behind ``q``.

    Shape [n, *q.shape]. For the collapsed-mean prior the prior mean is
    integrated against its optimal posterior given q.
    """
    mu = q.mu.data
    match prior:
        case Naive():
            loc, var = np.full_like(mu, prior.mu_p), np.full_like(mu, prior.v)
        case CollapsedMean() if not isinstance(prior, MeanAll):
            weight = prior.alpha / (prior.alpha + prior.gamma)
            loc = weight * mu
            var = np.full_like(mu, prior.gamma + prior.gamma * weight)
        case EmpiricalBayes() if not isinstance(prior, EBAll):
            s = eb_optimal_s(q, prior.alpha, prior.beta).data
            loc, var = np.zeros_like(mu), np.broadcast_to(np.expand_dims(s, -1), mu.shape)
        case _:
            raise ValueError(f"Prior sampling supports naive, mean and eb priors, not {prior.kind}")
    return loc + np.sqrt(var) * rng.standard_normal((n, *mu.shape))


@dataclass(frozen=True, kw_only=True)
class ObjectiveConfig:
    eta: float = 0.1
    eta_aux: float = 0.1
    M: int = 10

    def __post_init__(self):
        if self.eta < 0 or self.eta_aux < 0:
            raise ValueError("eta and eta_aux must be non-negative")
        if self.M < 1:
            raise ValueError("M must be at least 1")


def total_objective(
    net: Network,
    X: np.ndarray,
    y: np.ndarray,
    aux_X: np.ndarray | None,
    prior: PriorSpec,
    cfg: ObjectiveConfig,
    rng: np.random.Generator,
    *,
    task: str = "classification",
) -> Tensor:
    """Mean loss + eta * mean regularizer + eta_aux * mean auxiliary regularizer."""
    if len(X) == 0:
        raise ValueError("The training batch is empty")
    q = VariationalOutput(*forward_heads(net, X))
    if task == "classification":
        loss = mc_nll_classification(q, y, cfg.M, rng).mean()
    elif task == "regression":
        head = RegressionHead.from_output(q)
        loss = mc_nll_regression(head, y, cfg.M, rng, net.spec.link).mean()
    else:
        raise ValueError(f"Unknown task {task!r}")

    total = loss
    if cfg.eta > 0:
        total = total + cfg.eta * regularizer(q, prior)
    if cfg.eta_aux > 0:
        if aux_X is None or len(aux_X) == 0:
            raise ValueError("eta_aux > 0 needs auxiliary inputs")
        q_aux = VariationalOutput(*forward_heads(net, aux_X))
        total = total + cfg.eta_aux * regularizer(q_aux, prior)
    return total
