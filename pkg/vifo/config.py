"""Run configuration: defaults, then a TOML/JSON file, then overrides.

A ``manifest.json`` written by a previous run is accepted as a config file;
its recorded snapshot is used, so re-running it repeats the run exactly.
"""

import json
import os
import re
import tomllib
import types
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from .data import DatasetConfig
from .metrics import BINNINGS
from .networks import Link, MlpSpec
from .regularizers import (
    CollapsedMean,
    Naive,
    ObjectiveConfig,
    PriorSpec,
    prior_from_mapping,
    prior_to_mapping,
)

METHODS = ("vifo", "vi", "base")
TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off"}
VI_PRIOR_VARIANCE = 0.05


class ConfigError(ValueError):
    def __init__(
        self,
        message: str,
        *,
        field: str | None = None,
        line: int | None = None,
        path: str | None = None,
    ):
        prefix = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(prefix + (f"{field}: " if field else "") + message)
        self.field = field
        self.line = line
        self.path = path


def environment_boolean(name: str, default: bool = False) -> bool:
    value = os.environ.get(name)
    if value is None:
        return default

    normalized = value.strip().lower()
    if normalized in TRUE_VALUES:
        return True
    if normalized in FALSE_VALUES:
        return False
    raise ValueError(f"{name} must be one of: 1, 0, true, false, yes, no, on, off")


@dataclass(kw_only=True)
class OptimizerConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


@dataclass(kw_only=True)
class NetworkConfig:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    link: str = "softplus"
    link_cap: float = 1e4
    separate_heads: bool = False
    init_variance: float = 1.0

    def __post_init__(self):
        Link(kind=self.link, cap=self.link_cap)
        if any(width < 1 for width in self.hidden):
            raise ValueError("hidden widths must be positive")

    def spec(self, input_dim: int, output_dim: int) -> MlpSpec:
        return MlpSpec(
            input_dim=input_dim,
            hidden=self.hidden,
            output_dim=output_dim,
            activation=self.activation,
            link=Link(kind=self.link, cap=self.link_cap),
            separate_heads=self.separate_heads,
            init_variance=self.init_variance,
        )


@dataclass(kw_only=True)
class EvaluationConfig:
    ece_bins: int = 20
    ece_binning: str = "width"
    common_random_numbers: bool = False

    def __post_init__(self):
        if self.ece_bins < 1:
            raise ValueError("ece_bins must be at least 1")
        if self.ece_binning not in BINNINGS:
            raise ValueError(f"ece_binning must be one of {', '.join(BINNINGS)}")


@dataclass(kw_only=True)
class TrainConfig:
    method: str = "vifo"
    prior: PriorSpec | None = None
    eta: float = 0.1
    eta_aux: float = 0.1
    m_train: int = 10
    m_eval: int = 100
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    ensemble_size: int = 5
    grad_clip: float = 10.0
    vi_log_std_init: float = -3.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    ood: DatasetConfig | None = None
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"must be one of {', '.join(METHODS)}", field="method")
        if self.prior is None:
            self.prior = default_prior(self.method)
        if self.method == "vi" and not isinstance(self.prior, Naive):
            raise ConfigError("weight-space VI only supports the naive prior", field="prior.kind")
        for name in ("eta", "eta_aux", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError("must be non-negative", field=name)
        for name in ("m_train", "m_eval", "epochs", "batch_size", "ensemble_size"):
            if getattr(self, name) < 1:
                raise ConfigError("must be at least 1", field=name)

    @property
    def task(self) -> str:
        if self.dataset.kind == "sinusoid":
            return "regression"
        if self.dataset.kind == "csv":
            return self.dataset.task
        return "classification"

    @property
    def prior_spec(self) -> PriorSpec:
        assert self.prior is not None
        return self.prior

    @property
    def clip(self) -> float | None:
        return self.grad_clip or None

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(eta=self.eta, eta_aux=self.eta_aux, M=self.m_train)

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["prior"] = prior_to_mapping(self.prior_spec)
        data["network"]["hidden"] = list(self.network.hidden)
        if self.ood is None:
            del data["ood"]
        return data


def default_prior(method: str) -> PriorSpec:
    if method == "vifo":
        return CollapsedMean()
    return Naive(v=VI_PRIOR_VARIANCE)


def _coerce(hint: Any, value: Any, name: str) -> Any:
    if typing.get_origin(hint) in (types.UnionType, typing.Union):
        options = [h for h in typing.get_args(hint) if h is not type(None)]
        return _coerce(options[0], value, name)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", field=name)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", field=name)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError("expected a number", field=name)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", field=name)
        return value
    if typing.get_origin(hint) is tuple:
        if not isinstance(value, list | tuple):
            raise ConfigError("expected a list", field=name)
        return tuple(_coerce(int, item, name) for item in value)
    return value


def _build(cls: type, data: Any, section: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError("expected a table", field=section)
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    prefix = f"{section}." if section else ""
    for key in data:
        if key not in known:
            raise ConfigError("unknown field", field=prefix + key)

    kwargs = {}
    for key, value in data.items():
        name = prefix + key
        if key in ("dataset", "ood"):
            kwargs[key] = _build(DatasetConfig, value, name)
        elif key in ("optimizer", "network", "evaluation"):
            kwargs[key] = _build(typing.get_type_hints(cls)[key], value, name)
        elif key == "prior":
            if not isinstance(value, dict):
                raise ConfigError("expected a table", field=name)
            try:
                kwargs[key] = prior_from_mapping(value)
            except ValueError as e:
                raise ConfigError(str(e), field=name) from None
        else:
            kwargs[key] = _coerce(hints[key], value, name)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e), field=section or None) from None


def config_from_mapping(data: dict[str, Any]) -> TrainConfig:
    return _build(TrainConfig, data, "")


def _line_of(text: str, key: str | None) -> int | None:
    if not key:
        return None
    leaf = key.rsplit(".", 1)[-1]
    pattern = re.compile(rf'^[ \t]*"?{re.escape(leaf)}"?[ \t]*[=:]', re.M)
    match = pattern.search(text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def _parse(text: str, path: Path) -> dict[str, Any]:
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(e.msg, line=e.lineno, path=str(path)) from None
        if not isinstance(data, dict):
            raise ConfigError("expected a JSON object", path=str(path))
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            match = re.search(r"line (\d+)", str(e))
            line = int(match.group(1)) if match else None
            raise ConfigError(str(e), line=line, path=str(path)) from None
    # A run manifest carries its config snapshot.
    if "config" in data and "members" in data:
        data = data["config"]
    return data


def load_config(path: str | Path | None = None, **overrides: Any) -> TrainConfig:
    """Defaults, then ``path`` (or $VIFO_CONFIG), then non-None ``overrides``."""
    if path is None:
        path = os.environ.get("VIFO_CONFIG") or None

    data: dict[str, Any] = {}
    text = ""
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", path=str(path)) from None
        data = _parse(text, path)

    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    if environment_boolean("VIFO_COMMON_RANDOM_NUMBERS"):
        data.setdefault("evaluation", {})["common_random_numbers"] = True

    try:
        return config_from_mapping(data)
    except ConfigError as e:
        if path is None or e.path is not None:
            raise
        raise ConfigError(
            str(e).removeprefix(f"{e.field}: ") if e.field else str(e),
            field=e.field,
            line=_line_of(text, e.field),
            path=str(path),
        ) from None


def resolve_threads(requested: int | None, ensemble_size: int) -> int:
    """Worker count: the flag, else $VIFO_THREADS, else one per member."""
    if requested is None:
        env = os.environ.get("VIFO_THREADS")
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise ValueError("VIFO_THREADS must be an integer") from None
    if requested is None:
        requested = ensemble_size
    return max(1, min(requested, ensemble_size))
