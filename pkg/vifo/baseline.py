"""Mean-field Gaussian VI over network weights, and the plain network.

The plain ("base") model shares everything with VI except that the weight
noise is switched off and the KL term is dropped.
"""

import logging
import math
from collections.abc import Sized
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from .autodiff import Tensor, as_tensor, logsumexp
from .core import LOG_2PI, one_hot
from .networks import Link, MlpSpec, Network, forward_mean, init_network, mlp_forward
from .performance import EpochTimings, time_epochs

log = logging.getLogger(__name__)

DEFAULT_LOG_STD = -3.0


@dataclass
class GaussianWeights:
    spec: MlpSpec
    means: list[Tensor]
    log_stds: list[Tensor]

    def __post_init__(self):
        for mean, log_std in zip(self.means, self.log_stds, strict=True):
            if mean.shape != log_std.shape:
                raise ValueError(f"mean {mean.shape} and log-std {log_std.shape} differ")

    @classmethod
    def from_network(cls, net: Network, log_std: float = DEFAULT_LOG_STD) -> "GaussianWeights":
        params = net.base_parameters()
        return cls(
            spec=net.spec,
            means=[Tensor.leaf(p.data, f"{p.name}.mean") for p in params],
            log_stds=[Tensor.leaf(np.full(p.shape, log_std), f"{p.name}.log_std") for p in params],
        )

    @classmethod
    def prior(cls, spec: MlpSpec, prior_var: float) -> "GaussianWeights":
        """N(0, prior_var) on every weight of ``spec``'s plain network."""
        if not prior_var > 0:
            raise ValueError("prior_var must be positive")
        shapes = [p.shape for p in init_network(spec, 0).base_parameters()]
        log_std = 0.5 * math.log(prior_var)
        return cls(
            spec=spec,
            means=[Tensor.leaf(np.zeros(shape)) for shape in shapes],
            log_stds=[Tensor.leaf(np.full(shape, log_std)) for shape in shapes],
        )

    def parameters(self) -> list[Tensor]:
        return [*self.means, *self.log_stds]

    def parameter_count(self) -> int:
        return sum(mean.data.size for mean in self.means)

    def sample(self, rng: np.random.Generator) -> list[Tensor]:
        return [
            mean + log_std.exp() * rng.standard_normal(mean.shape)
            for mean, log_std in zip(self.means, self.log_stds, strict=True)
        ]

    def to_json(self) -> dict[str, Any]:
        return {
            "spec": self.spec.to_json(),
            "means": [m.data.tolist() for m in self.means],
            "log_stds": [s.data.tolist() for s in self.log_stds],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "GaussianWeights":
        return cls(
            spec=MlpSpec.from_json(data["spec"]),
            means=[Tensor.leaf(m) for m in data["means"]],
            log_stds=[Tensor.leaf(s) for s in data["log_stds"]],
        )


def forward_weights(weights: list[Tensor], x) -> Tensor:
    """Forward pass of the plain network with an explicit weight list."""
    pairs = list(zip(weights[0::2], weights[1::2], strict=True))
    *trunk, (head_w, head_b) = pairs
    return mlp_forward(trunk, as_tensor(x)) @ head_w + head_b


def output_nll(z: Tensor, y, task: str, link: Link) -> Tensor:
    """Per-example NLL of deterministic outputs z of shape [B, K]."""
    if task == "classification":
        return logsumexp(z, axis=-1) - (z * one_hot(y, z.shape[-1])).sum(axis=-1)
    if task == "regression":
        variance = link(z[:, 1])
        residual = np.asarray(y, dtype=np.float64) - z[:, 0]
        return 0.5 * (LOG_2PI + variance.log()) + residual.square() / (2.0 * variance)
    raise ValueError(f"Unknown task {task!r}")


def weight_kl(qW: GaussianWeights, prior_var: float) -> Tensor:
    """Sum of per-weight KL(N(m, s^2) || N(0, prior_var))."""
    if not prior_var > 0:
        raise ValueError("prior_var must be positive")
    total: Tensor | None = None
    for mean, log_std in zip(qW.means, qW.log_stds, strict=True):
        var = (2.0 * log_std).exp()
        kl = 0.5 * (
            var / prior_var + mean.square() / prior_var - 1.0 + math.log(prior_var) - 2.0 * log_std
        ).sum()
        total = kl if total is None else total + kl
    assert total is not None
    return total


def vi_objective(
    qW: GaussianWeights,
    X: np.ndarray,
    y: np.ndarray,
    prior_var: float,
    eta: float,
    M: int,
    rng: np.random.Generator,
    *,
    dataset_size: int,
    task: str = "classification",
) -> Tensor:
    """Mean per-example NLL over M weight draws plus eta * KL / dataset_size."""
    if M < 1:
        raise ValueError(f"Need at least one weight sample, got M={M}")
    if dataset_size < 1:
        raise ValueError("dataset_size must be positive")
    link = qW.spec.link
    nll: Tensor | None = None
    for _ in range(M):
        draw = output_nll(forward_weights(qW.sample(rng), X), y, task, link).mean()
        nll = draw if nll is None else nll + draw
    assert nll is not None
    return nll / float(M) + eta * weight_kl(qW, prior_var) / float(dataset_size)


def base_objective(net: Network, X: np.ndarray, y: np.ndarray, *, task: str) -> Tensor:
    return output_nll(forward_mean(net, X), y, task, net.spec.link).mean()


class EpochRunner(Protocol):
    def run_epoch(self, dataset: Any) -> float: ...


def epoch_time(
    trainer: EpochRunner, dataset: Sized, *, epochs: int = 5, warmup: int = 1, label: str = "-"
) -> EpochTimings:
    """Median, mean and std of ``epochs`` timed epochs after ``warmup`` untimed ones."""
    if len(dataset) == 0:
        raise ValueError("Cannot time epochs on an empty dataset")
    return time_epochs(
        lambda: trainer.run_epoch(dataset), epochs=epochs, warmup=warmup, label=label
    )
