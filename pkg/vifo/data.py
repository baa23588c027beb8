"""Datasets: synthetic generators, CSV loading, scaling and auxiliary inputs."""

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from sklearn.datasets import make_blobs, make_moons

log = logging.getLogger(__name__)

TASKS = ("classification", "regression")
SINUSOID_INTERVALS = ((-0.75 * math.pi, -0.5 * math.pi), (0.5 * math.pi, 0.75 * math.pi))


class CsvFormatError(ValueError):
    def __init__(self, message: str, *, row: int | None = None, column: int | None = None):
        location = ""
        if row is not None:
            location = f"row {row}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(location + message)
        self.row = row
        self.column = column


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    task: str = "classification"
    n_classes: int | None = None
    source: str = "memory"
    seed: int | None = None
    transform: dict[str, Any] = field(default_factory=dict)
    feature_mins: np.ndarray = field(init=False)
    feature_maxs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.task not in TASKS:
            raise ValueError(f"Unknown task {self.task!r}")
        self.y = np.asarray(self.y, dtype=np.int64 if self.task == "classification" else np.float64)
        if len(self.X) < 1:
            raise ValueError("A dataset needs at least one row")
        if len(self.y) != len(self.X):
            raise ValueError(f"{len(self.X)} rows but {len(self.y)} targets")
        if self.task == "classification" and self.n_classes is None:
            self.n_classes = int(self.y.max()) + 1
        self.feature_mins = self.X.min(axis=0)
        self.feature_maxs = self.X.max(axis=0)

    def __len__(self) -> int:
        return len(self.X)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, index: np.ndarray, source: str | None = None) -> "Dataset":
        return Dataset(
            X=self.X[index],
            y=self.y[index],
            task=self.task,
            n_classes=self.n_classes,
            source=source or self.source,
            seed=self.seed,
            transform=dict(self.transform),
        )

    def describe(self) -> dict[str, Any]:
        """Manifest entry for this dataset."""
        return {
            "source": self.source,
            "seed": self.seed,
            "rows": len(self),
            "features": self.n_features,
            "task": self.task,
            "n_classes": self.n_classes,
            "transform": self.transform,
        }


def gen_sinusoid(n: int = 100, noise: float = 0.1, seed: int = 0) -> Dataset:
    """y = 2 sin x + noise * eps, x uniform on two intervals either side of zero."""
    if n < 2:
        raise ValueError("The sinusoid needs at least two points")
    rng = np.random.default_rng(seed)
    counts = (n - n // 2, n // 2)
    x = np.concatenate([
        rng.uniform(lo, hi, size=count)
        for (lo, hi), count in zip(SINUSOID_INTERVALS, counts, strict=True)
    ])
    y = 2.0 * np.sin(x) + noise * rng.standard_normal(n)
    return Dataset(X=x[:, None], y=y, task="regression", source="sinusoid", seed=seed)


def sinusoid_grid(n: int = 200) -> np.ndarray:
    return np.linspace(-math.pi, math.pi, n)[:, None]


def blob_centers(n_classes: int, n_features: int, distance: float) -> np.ndarray:
    """Centers on a circle in the first two coordinates, ``distance`` apart."""
    centers = np.zeros((n_classes, n_features))
    if n_classes == 1:
        return centers
    radius = distance / (2.0 * math.sin(math.pi / n_classes))
    angles = 2.0 * math.pi * np.arange(n_classes) / n_classes
    centers[:, 0] = radius * np.cos(angles)
    if n_features > 1:
        centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_blobs(
    n: int,
    n_classes: int,
    seed: int = 0,
    *,
    n_features: int = 2,
    std: float = 1.0,
    separation: float = 10.0,
    shift: float = 0.0,
) -> Dataset:
    """Isotropic Gaussian blobs whose neighbouring centers are ``separation * std`` apart.

    ``shift`` translates every point, for evaluating under covariate shift.
    """
    if n < n_classes:
        raise ValueError("Need at least one point per class")
    centers = blob_centers(n_classes, n_features, separation * std)
    X, y = make_blobs(n_samples=n, centers=centers, cluster_std=std, random_state=seed)
    source = "blobs" if shift == 0 else f"blobs+shift={shift}"
    return Dataset(
        X=X + shift, y=y, task="classification", n_classes=n_classes, source=source, seed=seed
    )


def gen_two_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    X, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    return Dataset(X=X, y=y, task="classification", n_classes=2, source="moons", seed=seed)


def aux_bounds(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """The data box widened by half its width on each side.

    Constant features get a unit-width interval around their value.
    """
    width = ds.feature_maxs - ds.feature_mins
    pad = np.where(width > 0, width / 2.0, 0.5)
    return ds.feature_mins - pad, ds.feature_maxs + pad


def sample_aux(ds: Dataset, m: int, rng: np.random.Generator) -> np.ndarray:
    if m < 1:
        raise ValueError("Need at least one auxiliary sample")
    low, high = aux_bounds(ds)
    if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
        raise ValueError("Feature ranges must be finite")
    return rng.uniform(low, high, size=(m, ds.n_features))


@dataclass(frozen=True, kw_only=True)
class CsvSchema:
    target: str | None
    task: str = "classification"
    features: tuple[str, ...] | None = None


def _parse_float(cell: str, row: int, column: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise CsvFormatError(f"non-numeric value {cell!r}", row=row, column=column) from None


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """Comma-separated, header row, UTF-8. Rows and columns in errors are 1-based."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise CsvFormatError(f"{path} is empty")
        header = [name.strip() for name in header]
        features = list(schema.features or [h for h in header if h != schema.target])
        wanted = features + ([schema.target] if schema.target else [])
        missing = [name for name in wanted if name not in header]
        if missing:
            raise CsvFormatError(f"missing column(s): {', '.join(missing)}")
        feature_idx = [header.index(name) for name in features]
        target_idx = header.index(schema.target) if schema.target else None

        rows, targets = [], []
        for row_number, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise CsvFormatError(
                    f"expected {len(header)} cells, got {len(cells)}", row=row_number
                )
            rows.append([_parse_float(cells[i], row_number, i + 1) for i in feature_idx])
            if target_idx is not None:
                value = _parse_float(cells[target_idx], row_number, target_idx + 1)
                if schema.task == "classification" and not value.is_integer():
                    raise CsvFormatError(
                        f"class label {value} is not an integer",
                        row=row_number,
                        column=target_idx + 1,
                    )
                targets.append(value)

    if not rows:
        raise CsvFormatError(f"{path} has no data rows")
    y = np.asarray(targets) if target_idx is not None else np.zeros(len(rows))
    log.info("csv path=%s rows=%d features=%d", path, len(rows), len(features))
    return Dataset(X=np.array(rows), y=y, task=schema.task, source=str(path))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def inverse(self, X: np.ndarray) -> np.ndarray:
        return X * self.scale + self.mean

    def to_json(self) -> dict[str, Any]:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


def standardize(ds: Dataset, transform: Standardizer | None = None) -> tuple[Dataset, Standardizer]:
    """Zero mean and unit variance per feature; constant features keep scale 1."""
    if transform is None:
        std = ds.X.std(axis=0)
        transform = Standardizer(mean=ds.X.mean(axis=0), scale=np.where(std > 0, std, 1.0))
    scaled = replace(ds, X=transform.apply(ds.X), transform={"standardize": transform.to_json()})
    return scaled, transform


def train_val_split(
    ds: Dataset, val_fraction: float = 0.1, seed: int = 0
) -> tuple[Dataset, Dataset]:
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    n_val = max(1, int(round(len(ds) * val_fraction)))
    if n_val >= len(ds):
        raise ValueError("The dataset is too small to split")
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(order[n_val:]), ds.subset(order[:n_val])


DATASET_KINDS = ("blobs", "moons", "sinusoid", "csv")


@dataclass(kw_only=True)
class DatasetConfig:
    kind: str = "blobs"
    n: int = 600
    n_classes: int = 3
    n_features: int = 2
    noise: float = 0.1
    separation: float = 10.0
    shift: float = 0.0
    path: str = ""
    target: str = "y"
    task: str = "classification"
    standardize: bool = True
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"kind must be one of {', '.join(DATASET_KINDS)}")
        if self.kind == "csv" and not self.path:
            raise ValueError("path is required for csv datasets")
        if self.n < 1:
            raise ValueError("n must be positive")


def build_dataset(cfg: DatasetConfig) -> Dataset:
    match cfg.kind:
        case "blobs":
            return gen_blobs(
                cfg.n,
                cfg.n_classes,
                cfg.seed,
                n_features=cfg.n_features,
                separation=cfg.separation,
                shift=cfg.shift,
            )
        case "moons":
            return gen_two_moons(cfg.n, cfg.noise, cfg.seed)
        case "sinusoid":
            return gen_sinusoid(cfg.n, cfg.noise, cfg.seed)
        case _:
            schema = CsvSchema(target=cfg.target or None, task=cfg.task)
            return load_csv(cfg.path, schema)
