"""Optimizer, single-model trainers and ensembles for the vifo, vi and base methods."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import softmax

from .autodiff import NonFiniteError, Tensor, grad
from .baseline import GaussianWeights, base_objective, forward_weights, vi_objective
from .config import OptimizerConfig, TrainConfig, resolve_threads
from .core import (
    CategoricalPrediction,
    RegressionHead,
    RegressionPrediction,
    VariationalOutput,
    ensemble_predict,
    ensemble_regression,
    predictive_classification,
    predictive_regression,
)
from .data import Dataset, sample_aux
from .networks import MlpSpec, Network, forward_heads, forward_mean, init_network, link_apply
from .performance import Stopwatch
from .regularizers import Naive, total_objective

log = logging.getLogger(__name__)

type Prediction = CategoricalPrediction | RegressionPrediction


class TrainingError(RuntimeError):
    def __init__(self, message: str, *, member: int, epoch: int, step: int):
        super().__init__(f"member={member} epoch={epoch} step={step}: {message}")
        self.member = member
        self.epoch = epoch
        self.step = step


@dataclass
class Adam:
    params: list[Tensor]
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    clip: float | None = None
    t: int = 0
    m: list[np.ndarray] = field(init=False)
    v: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> float:
        """Apply one update in place; returns the global gradient norm before clipping."""
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if self.clip is not None and norm > self.clip:
            grads = [g * (self.clip / norm) for g in grads]

        cfg = self.config
        self.t += 1
        correction1 = 1.0 - cfg.beta1**self.t
        correction2 = 1.0 - cfg.beta2**self.t
        for param, g, m, v in zip(self.params, grads, self.m, self.v, strict=True):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            param.data = param.data - cfg.lr * (m / correction1) / (
                np.sqrt(v / correction2) + cfg.eps
            )
        return norm


def output_dim(task: str, n_classes: int | None) -> int:
    """K: one logit per class, or (m, l) for regression."""
    if task == "regression":
        return 2
    if not n_classes or n_classes < 2:
        raise ValueError("Classification needs at least two classes")
    return n_classes


def build_spec(config: TrainConfig, dataset: Dataset) -> MlpSpec:
    return config.network.spec(dataset.n_features, output_dim(config.task, dataset.n_classes))


@dataclass
class MemberModel:
    """A trained model of any method, ready to predict and to serialize."""

    method: str
    task: str
    network: Network | None = None
    weights: GaussianWeights | None = None

    def __post_init__(self):
        if (self.weights is None) == (self.method == "vi"):
            raise ValueError(f"method {self.method!r} does not match the stored parameters")
        if self.method != "vi" and self.network is None:
            raise ValueError(f"method {self.method!r} needs a network")

    @property
    def spec(self) -> MlpSpec:
        if self.weights is not None:
            return self.weights.spec
        assert self.network is not None
        return self.network.spec

    def parameter_count(self) -> int:
        if self.weights is not None:
            return 2 * self.weights.parameter_count()
        assert self.network is not None
        if self.method == "base":
            return sum(p.data.size for p in self.network.base_parameters())
        return self.network.parameter_count()

    def predict(
        self, X: np.ndarray, M: int, rng: np.random.Generator, eps: np.ndarray | None = None
    ) -> Prediction:
        """Predictive distribution at ``X``; ``eps`` fixes the vifo classification noise."""
        link = self.spec.link
        if self.method == "vi":
            assert self.weights is not None
            draws = [forward_weights(self.weights.sample(rng), X).data for _ in range(M)]
            if self.task == "classification":
                return ensemble_predict([CategoricalPrediction(softmax(z, axis=-1)) for z in draws])
            return ensemble_regression([
                RegressionPrediction(mean=z[:, 0], variance=np.asarray(link_apply(link, z[:, 1])))
                for z in draws
            ])

        assert self.network is not None
        if self.method == "base":
            z = forward_mean(self.network, X).data
            if self.task == "classification":
                return CategoricalPrediction(softmax(z, axis=-1))
            variance = np.asarray(link_apply(link, z[:, 1]))
            return RegressionPrediction(mean=z[:, 0], variance=variance)

        q = VariationalOutput(*forward_heads(self.network, X))
        if self.task == "classification":
            return predictive_classification(q, M, rng, eps)
        return predictive_regression(RegressionHead.from_output(q), link, M, rng)

    def to_json(self) -> dict[str, Any]:
        data: dict[str, Any] = {"method": self.method, "task": self.task}
        if self.weights is not None:
            data["weights"] = self.weights.to_json()
        else:
            assert self.network is not None
            data["network"] = self.network.to_json()
        return data

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "MemberModel":
        if data["method"] == "vi":
            return cls(
                method="vi", task=data["task"], weights=GaussianWeights.from_json(data["weights"])
            )
        network = Network.from_json(data["network"])
        return cls(method=data["method"], task=data["task"], network=network)


class Trainer:
    """Trains one member. Initialization, shuffling, noise and auxiliary inputs
    each draw from their own stream of the member seed, so the vifo and base
    methods see identical batches under the same seed.
    """

    def __init__(self, config: TrainConfig, spec: MlpSpec, *, seed: int, member: int = 0):
        self.config = config
        self.spec = spec
        self.seed = seed
        self.member = member
        init, shuffle, noise, aux = np.random.SeedSequence(seed).spawn(4)
        self.network = init_network(spec, init)
        self.weights = (
            GaussianWeights.from_network(self.network, config.vi_log_std_init)
            if config.method == "vi"
            else None
        )
        self.shuffle_rng = np.random.default_rng(shuffle)
        self.noise_rng = np.random.default_rng(noise)
        self.aux_rng = np.random.default_rng(aux)
        self.optimizer = Adam(self.parameters(), config.optimizer, clip=config.clip)
        self.epoch = 0
        self.losses: list[float] = []

    def parameters(self) -> list[Tensor]:
        match self.config.method:
            case "vi":
                assert self.weights is not None
                return self.weights.parameters()
            case "base":
                return self.network.base_parameters()
            case _:
                return self.network.parameters()

    def objective(self, X: np.ndarray, y: np.ndarray, dataset: Dataset) -> Tensor:
        cfg = self.config
        match cfg.method:
            case "vi":
                assert self.weights is not None
                prior = cfg.prior_spec
                assert isinstance(prior, Naive)
                return vi_objective(
                    self.weights,
                    X,
                    y,
                    prior.v,
                    cfg.eta,
                    cfg.m_train,
                    self.noise_rng,
                    dataset_size=len(dataset),
                    task=cfg.task,
                )
            case "base":
                return base_objective(self.network, X, y, task=cfg.task)
            case _:
                aux = sample_aux(dataset, len(X), self.aux_rng) if cfg.eta_aux > 0 else None
                return total_objective(
                    self.network,
                    X,
                    y,
                    aux,
                    cfg.prior_spec,
                    cfg.objective(),
                    self.noise_rng,
                    task=cfg.task,
                )

    def run_epoch(self, dataset: Dataset) -> float:
        """One shuffled pass in mini-batches; returns the example-weighted mean objective."""
        params = self.parameters()
        order = self.shuffle_rng.permutation(len(dataset))
        total = 0.0
        for step, start in enumerate(range(0, len(order), self.config.batch_size)):
            index = order[start : start + self.config.batch_size]
            try:
                loss = self.objective(dataset.X[index], dataset.y[index], dataset)
                grads = grad(loss, params)
            except NonFiniteError as e:
                raise TrainingError(
                    str(e), member=self.member, epoch=self.epoch, step=step
                ) from e
            self.optimizer.step(grads)
            total += loss.item() * len(index)
        self.epoch += 1
        return total / len(order)

    def fit(self, dataset: Dataset, epochs: int | None = None) -> list[float]:
        for _ in range(epochs or self.config.epochs):
            with Stopwatch() as watch:
                loss = self.run_epoch(dataset)
            self.losses.append(loss)
            log.debug(
                "epoch method=%s member=%d epoch=%d loss=%.4f seconds=%.4f",
                self.config.method,
                self.member,
                self.epoch,
                loss,
                watch.seconds,
            )
        return self.losses

    def model(self) -> MemberModel:
        if self.weights is not None:
            return MemberModel(method="vi", task=self.config.task, weights=self.weights)
        return MemberModel(method=self.config.method, task=self.config.task, network=self.network)


@dataclass(kw_only=True)
class TrainedMember:
    index: int
    seed: int
    model: MemberModel
    losses: list[float]
    seconds: float


def train_member(config: TrainConfig, dataset: Dataset, index: int) -> TrainedMember:
    seed = config.seed + index
    trainer = Trainer(config, build_spec(config, dataset), seed=seed, member=index)
    with Stopwatch() as watch:
        losses = trainer.fit(dataset)
    log.info(
        "trained method=%s member=%d seed=%d epochs=%d loss=%.4f seconds=%.2f",
        config.method,
        index,
        seed,
        len(losses),
        losses[-1],
        watch.seconds,
    )
    return TrainedMember(
        index=index, seed=seed, model=trainer.model(), losses=losses, seconds=watch.seconds
    )


def train_ensemble(
    config: TrainConfig, dataset: Dataset, *, threads: int | None = None
) -> list[TrainedMember]:
    """Train ``ensemble_size`` independent members with seeds seed, seed+1, ..."""
    workers = resolve_threads(threads, config.ensemble_size)
    indices = range(config.ensemble_size)
    if workers == 1:
        return [train_member(config, dataset, i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: train_member(config, dataset, i), indices))
