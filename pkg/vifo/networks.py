"""Dual-head MLPs: a shared trunk feeding a mean head and a variance head.

The variance head's logits pass through a positive link so that the output
distribution q(z|x) = N(mu(x), diag sigma2(x)) is always well defined.
"""

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff import Tensor, as_tensor

LINK_KINDS = ("softplus", "exp", "bounded_exp")
ACTIVATIONS = ("relu",)
DEFAULT_CAP = 1e4
# Keeps sigma2 strictly positive where softplus underflows to zero.
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True, kw_only=True)
class Link:
    kind: str = "softplus"
    cap: float = DEFAULT_CAP

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ValueError(f"Unknown link {self.kind!r}; expected one of {', '.join(LINK_KINDS)}")
        if not self.cap > 0:
            raise ValueError(f"Link cap must be positive, got {self.cap}")

    def __call__(self, logits: Tensor) -> Tensor:
        if self.kind == "softplus":
            return logits.softplus()
        if self.kind == "exp":
            return logits.exp()
        # Clip the logit first so exp never overflows; the gradient is zero
        # past the cap either way.
        return logits.clip_max(math.log(self.cap)).exp()

    def inverse(self, value: float) -> float:
        """The logit l with g(l) == value."""
        if not value > 0:
            raise ValueError(f"Link inverse needs a positive value, got {value}")
        if self.kind == "softplus":
            return float(np.log(np.expm1(value)))
        if self.kind == "bounded_exp" and value > self.cap:
            raise ValueError(f"{value} exceeds the link cap {self.cap}")
        return math.log(value)


def link_apply(link: Link, l: float | np.ndarray) -> float | np.ndarray:
    """Numeric evaluation of the link, without building a graph."""
    l = np.asarray(l, dtype=np.float64)
    if link.kind == "softplus":
        out = np.maximum(l, 0.0) + np.log1p(np.exp(-np.abs(l)))
    elif link.kind == "exp":
        out = np.exp(l)
    else:
        out = np.exp(np.minimum(l, math.log(link.cap)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, kw_only=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    link: Link = field(default_factory=Link)
    separate_heads: bool = False
    init_variance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(width < 1 for width in self.hidden):
            raise ValueError(f"All hidden widths must be >= 1, got {list(self.hidden)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unsupported activation {self.activation!r}")
        if not self.init_variance > 0:
            raise ValueError("init_variance must be positive")

    def _trunk_count(self) -> int:
        widths = (self.input_dim, *self.hidden)
        return sum(a * b + b for a, b in zip(widths, widths[1:], strict=False))

    @property
    def features(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def parameter_count(self) -> int:
        head = self.features * self.output_dim + self.output_dim
        trunks = 2 if self.separate_heads else 1
        return trunks * self._trunk_count() + 2 * head

    def to_json(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "link": self.link.kind,
            "link_cap": self.link.cap,
            "separate_heads": self.separate_heads,
            "init_variance": self.init_variance,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "MlpSpec":
        return cls(
            input_dim=data["input_dim"],
            hidden=tuple(data["hidden"]),
            output_dim=data["output_dim"],
            activation=data.get("activation", "relu"),
            link=Link(kind=data.get("link", "softplus"), cap=data.get("link_cap", DEFAULT_CAP)),
            separate_heads=data.get("separate_heads", False),
            init_variance=data.get("init_variance", 1.0),
        )


@dataclass
class Layer:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


@dataclass
class Network:
    spec: MlpSpec
    trunk: list[Layer]
    mean_head: Layer
    var_head: Layer
    var_trunk: list[Layer] | None = None

    def parameters(self) -> list[Tensor]:
        layers = [*self.trunk, *(self.var_trunk or []), self.mean_head, self.var_head]
        return [p for layer in layers for p in (layer.weight, layer.bias)]

    def base_parameters(self) -> list[Tensor]:
        """Trunk and mean head: the weights of the plain network."""
        return [p for layer in (*self.trunk, self.mean_head) for p in (layer.weight, layer.bias)]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def to_json(self) -> dict[str, Any]:
        # repr floats round-trip exactly (at most 17 significant digits).
        return {
            "spec": self.spec.to_json(),
            "parameters": [p.data.tolist() for p in self.parameters()],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "Network":
        spec = MlpSpec.from_json(data["spec"])
        net = init_network(spec, 0)
        params = net.parameters()
        if len(params) != len(data["parameters"]):
            raise ValueError("Parameter list does not match the network spec")
        for param, values in zip(params, data["parameters"], strict=True):
            array = np.asarray(values, dtype=np.float64)
            if array.shape != param.shape:
                raise ValueError(f"Parameter shape {array.shape} != expected {param.shape}")
            param.data = array
        return net


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Layer:
    bound = 1.0 / math.sqrt(fan_in)
    return Layer(
        weight=Tensor.leaf(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.weight"),
        bias=Tensor.leaf(rng.uniform(-bound, bound, size=fan_out), f"{name}.bias"),
    )


def _init_trunk(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> list[Layer]:
    widths = (spec.input_dim, *spec.hidden)
    return [
        _uniform_layer(rng, a, b, f"{prefix}{i}")
        for i, (a, b) in enumerate(zip(widths, widths[1:], strict=False))
    ]


def init_network(spec: MlpSpec, seed: int | np.random.SeedSequence) -> Network:
    """Fan-in scaled uniform weights; the variance bias starts at g^-1(init_variance)."""
    rng = np.random.default_rng(seed)
    trunk = _init_trunk(spec, rng, "trunk")
    var_trunk = _init_trunk(spec, rng, "var_trunk") if spec.separate_heads else None
    mean_head = _uniform_layer(rng, spec.features, spec.output_dim, "mean_head")
    var_head = _uniform_layer(rng, spec.features, spec.output_dim, "var_head")
    var_head.bias.data = np.full(spec.output_dim, spec.link.inverse(spec.init_variance))
    return Network(
        spec=spec, trunk=trunk, mean_head=mean_head, var_head=var_head, var_trunk=var_trunk
    )


def mlp_forward(layers: list[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    """ReLU after every layer; the caller adds the final linear head."""
    for weight, bias in layers:
        x = (x @ weight + bias).relu()
    return x


def _trunk(layers: list[Layer], x: Tensor) -> Tensor:
    return mlp_forward([(layer.weight, layer.bias) for layer in layers], x)


def _check_input(net: Network, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != net.spec.input_dim:
        raise ValueError(
            f"Expected input of shape [B, {net.spec.input_dim}], got {list(x.shape)}"
        )
    return x


def forward_heads(net: Network, x) -> tuple[Tensor, Tensor]:
    """Mean and variance of q(z|x) for a batch ``x`` of shape [B, D]."""
    x = _check_input(net, x)
    features = _trunk(net.trunk, x)
    var_features = _trunk(net.var_trunk, x) if net.var_trunk is not None else features
    mu = net.mean_head(features)
    sigma2 = net.spec.link(net.var_head(var_features)) + VARIANCE_FLOOR
    return mu, sigma2


def forward_mean(net: Network, x) -> Tensor:
    """Output of the plain network (trunk and mean head only)."""
    x = _check_input(net, x)
    return net.mean_head(_trunk(net.trunk, x))
