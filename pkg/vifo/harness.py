"""Experiment commands: train, evaluate, bench and sinusoid-demo.

Every command writes into an output directory; only the coordinating
process writes files, ensemble workers just return their results.
"""

import csv
import importlib.metadata
import json
import logging
import math
import subprocess
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from datetime import UTC, datetime
from pathlib import Path
from typing import Any

import click
import numpy as np
from scipy.stats import linregress

from .autodiff import NonFiniteError
from .baseline import GaussianWeights, epoch_time, forward_weights
from .config import ConfigError, NetworkConfig, TrainConfig, default_prior, load_config
from .core import (
    CategoricalPrediction,
    RegressionPrediction,
    VariationalOutput,
    draw_noise,
    ensemble_predict,
)
from .data import (
    CsvFormatError,
    CsvSchema,
    Dataset,
    DatasetConfig,
    Standardizer,
    build_dataset,
    load_csv,
    sinusoid_grid,
    standardize,
    train_val_split,
)
from .logging_setup import run_log
from .metrics import calibration_bins, evaluate_predictions, nll_and_accuracy
from .models import EvalReport, MemberRecord, MetricRow, RunManifest, TimingRow
from .networks import MlpSpec, forward_heads
from .performance import Stopwatch
from .regularizers import CollapsedMean, sample_prior_z
from .training import MemberModel, Trainer, TrainingError, build_spec, train_ensemble

log = logging.getLogger(__name__)

MODELS_DIR = "models"
BENCH_METHODS = ("base", "vifo", "vi")
DEFAULT_M_VALUES = (1, 5, 10, 20)
# Fixed entropy for the evaluation stream, distinct from any training stream.
EVAL_STREAM = 1
# Prior weight variance of the VI comparison in the sinusoid demo.
SINUSOID_VI_PRIOR_VARIANCE = 1.0


def git_version() -> str:
    """``git describe`` of the source tree, else the installed package version."""
    try:
        result = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.TimeoutExpired):
        result = None
    if result is not None and result.returncode == 0 and result.stdout.strip():
        return result.stdout.strip()
    try:
        return importlib.metadata.version("vifo")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict[str, Any]]):
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({key: "" if value is None else value for key, value in row.items()})


def write_json(path: Path, data: Any):
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    ood: Dataset | None
    transform: Standardizer | None


def _apply(transform: Standardizer | None, ds: Dataset) -> Dataset:
    return standardize(ds, transform)[0] if transform is not None else ds


def prepare_data(config: TrainConfig) -> Splits:
    """Train/validation split of the configured dataset, scaled on the training part."""
    ds = build_dataset(config.dataset)
    train, val = train_val_split(ds, config.dataset.val_fraction, seed=config.dataset.seed)
    transform = None
    if config.dataset.standardize:
        train, transform = standardize(train)
        val = _apply(transform, val)
    ood = None
    if config.ood is not None:
        ood = build_dataset(config.ood)
        if ood.n_features != train.n_features:
            raise ValueError(
                f"OOD data has {ood.n_features} features, training data {train.n_features}"
            )
        ood = _apply(transform, ood)
    log.info(
        "data source=%s train=%d val=%d ood=%s",
        ds.source,
        len(train),
        len(val),
        len(ood) if ood is not None else "-",
    )
    return Splits(train=train, val=val, ood=ood, transform=transform)


def _eval_rng(config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, EVAL_STREAM])


def _shared_noise(
    config: TrainConfig, n: int, K: int, rng: np.random.Generator
) -> np.ndarray | None:
    if not config.evaluation.common_random_numbers:
        return None
    return draw_noise(rng, config.m_eval, (n, K))


@dataclass
class Evaluation:
    rows: list[MetricRow]
    reports: list[EvalReport]
    member_preds: list[CategoricalPrediction]
    ensemble: CategoricalPrediction


def evaluate_members(
    models: Sequence[MemberModel],
    seeds: Sequence[int],
    config: TrainConfig,
    data: Dataset,
    ood: Dataset | None = None,
) -> Evaluation:
    """One metrics row per member plus a final row for their ensemble."""
    if data.task != "classification":
        raise ValueError("Metrics are defined for classification runs")
    rng = _eval_rng(config)
    K = models[0].spec.output_dim
    if data.n_classes != K:
        raise ValueError(
            f"K mismatch: the models predict {K} classes, the data has {data.n_classes}"
        )
    eps = _shared_noise(config, len(data), K, rng)
    ood_eps = _shared_noise(config, len(ood), K, rng) if ood is not None else None

    labels = {
        "method": config.method,
        "prior": config.prior_spec.kind if config.method != "base" else "-",
        "eta": config.eta,
        "eta_aux": config.eta_aux,
    }
    evaluation = config.evaluation
    rows: list[MetricRow] = []
    reports: list[EvalReport] = []
    member_preds: list[CategoricalPrediction] = []
    member_ood: list[CategoricalPrediction] = []
    total_seconds = 0.0
    for model, seed in zip(models, seeds, strict=True):
        with Stopwatch() as watch:
            preds = model.predict(data.X, config.m_eval, rng, eps)
            ood_preds = None
            if ood is not None:
                ood_preds = model.predict(ood.X, config.m_eval, rng, ood_eps)
        assert isinstance(preds, CategoricalPrediction)
        total_seconds += watch.seconds
        member_preds.append(preds)
        if isinstance(ood_preds, CategoricalPrediction):
            member_ood.append(ood_preds)
        report = evaluate_predictions(
            preds,
            data.y,
            ood_preds=ood_preds,
            n_bins=evaluation.ece_bins,
            binning=evaluation.ece_binning,
            seconds=watch.seconds,
        )
        reports.append(report)
        rows.append(MetricRow.from_report(report, seed=seed, **labels))

    ensemble = ensemble_predict(member_preds)
    ensemble_ood = ensemble_predict(member_ood) if ood is not None else None
    report = evaluate_predictions(
        ensemble,
        data.y,
        ood_preds=ensemble_ood,
        n_bins=evaluation.ece_bins,
        binning=evaluation.ece_binning,
        seconds=total_seconds,
    )
    reports.append(report)
    rows.append(MetricRow.from_report(report, seed="ensemble", **labels))
    return Evaluation(rows=rows, reports=reports, member_preds=member_preds, ensemble=ensemble)


def ensemble_sweep(
    member_preds: Sequence[CategoricalPrediction], labels, sizes: Iterable[int] = (1, 2, 5)
) -> dict[int, float]:
    """NLL of the ensemble of the first k members, for each k in ``sizes``."""
    sweep = {}
    for size in sizes:
        if not 1 <= size <= len(member_preds):
            raise ValueError(f"Ensemble size {size} outside [1, {len(member_preds)}]")
        sweep[size] = nll_and_accuracy(ensemble_predict(member_preds[:size]), labels)[0]
    return sweep


def _write_metrics(out_dir: Path, evaluation: Evaluation, config: TrainConfig, labels):
    write_csv(out_dir / "metrics.csv", MetricRow.columns(), (r.to_json() for r in evaluation.rows))
    bins = calibration_bins(
        evaluation.ensemble, labels, config.evaluation.ece_bins, config.evaluation.ece_binning
    )
    write_csv(
        out_dir / "calibration.csv",
        ("lower", "upper", "count", "accuracy", "confidence"),
        (vars(b) for b in bins),
    )


def run_training(
    config: TrainConfig, out_dir: Path, *, threads: int | None = None
) -> RunManifest:
    """Train the ensemble, evaluate it on held-out data and write the run directory."""
    with run_log(out_dir), Stopwatch() as watch:
        splits = prepare_data(config)
        members = train_ensemble(config, splits.train, threads=threads)

    models_dir = out_dir / MODELS_DIR
    models_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for member in members:
        name = f"{MODELS_DIR}/member-{member.index}.json"
        write_json(out_dir / name, member.model.to_json())
        records.append(
            MemberRecord(
                index=member.index,
                seed=member.seed,
                model_file=name,
                losses=member.losses,
                seconds=member.seconds,
            )
        )
    write_csv(
        out_dir / "losses.csv",
        ("member", "epoch", "loss"),
        (
            {"member": m.index, "epoch": epoch, "loss": loss}
            for m in members
            for epoch, loss in enumerate(m.losses, start=1)
        ),
    )

    reports = []
    if config.task == "classification":
        evaluation = evaluate_members(
            [m.model for m in members], [m.seed for m in members], config, splits.val, splits.ood
        )
        _write_metrics(out_dir, evaluation, config, splits.val.y)
        reports = [r.to_json() for r in evaluation.reports]

    manifest = RunManifest(
        version=git_version(),
        config=config.to_json(),
        dataset=splits.train.describe(),
        members=records,
        wall_clock_seconds=watch.seconds,
        created_at=datetime.now(UTC).isoformat(timespec="seconds"),
        reports=reports,
    )
    write_json(out_dir / RunManifest.FILE_NAME, manifest.to_json())
    log.info("run out_dir=%s members=%d seconds=%.2f", out_dir, len(members), watch.seconds)
    return manifest


def load_run(model_dir: Path) -> tuple[RunManifest, TrainConfig, list[MemberModel]]:
    manifest_path = model_dir / RunManifest.FILE_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"No {RunManifest.FILE_NAME} in {model_dir}")
    manifest = RunManifest.from_json(json.loads(manifest_path.read_text(encoding="utf-8")))
    config = load_config(manifest_path)
    models = []
    for record in manifest.members:
        path = model_dir / record.model_file
        if not path.is_file():
            raise FileNotFoundError(f"Missing model file {path}")
        models.append(MemberModel.from_json(json.loads(path.read_text(encoding="utf-8"))))
    return manifest, config, models


def _transform_of(manifest: RunManifest) -> Standardizer | None:
    stored = manifest.dataset.get("transform", {}).get("standardize")
    if not stored:
        return None
    return Standardizer(mean=np.asarray(stored["mean"]), scale=np.asarray(stored["scale"]))


def _with_run_classes(data: Dataset, manifest: RunManifest) -> Dataset:
    """Labels read from a file only bound K from below; take K from the run when they fit."""
    stored = manifest.dataset.get("n_classes")
    if data.task != "classification" or stored is None or data.n_classes is None:
        return data
    return replace(data, n_classes=stored) if data.n_classes < stored else data


def load_inputs(path: Path, target: str) -> Dataset:
    """Feature columns of a CSV; a label column named ``target`` is dropped if present."""
    try:
        return load_csv(path, CsvSchema(target=target, task="regression"))
    except CsvFormatError as e:
        if "missing column" not in str(e):
            raise
    return load_csv(path, CsvSchema(target=None, task="regression"))


def run_evaluation(
    model_dir: Path,
    *,
    dataset_path: Path | None = None,
    ood_path: Path | None = None,
    out_dir: Path | None = None,
) -> Evaluation:
    manifest, config, models = load_run(model_dir)
    if dataset_path is not None:
        data = load_csv(dataset_path, CsvSchema(target=config.dataset.target, task=config.task))
        data = _apply(_transform_of(manifest), _with_run_classes(data, manifest))
    else:
        data = prepare_data(config).val
    ood = None
    if ood_path is not None:
        ood = load_inputs(ood_path, config.dataset.target)
        if ood.n_features != data.n_features:
            raise ValueError(
                f"OOD data has {ood.n_features} features, the models take {data.n_features}"
            )
        ood = _apply(_transform_of(manifest), ood)
    elif config.ood is not None:
        ood = prepare_data(config).ood

    evaluation = evaluate_members(models, [m.seed for m in manifest.members], config, data, ood)
    out_dir = out_dir or model_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_metrics(out_dir, evaluation, config, data.y)
    return evaluation


@dataclass
class BenchResult:
    rows: list[TimingRow]
    fits: dict[str, dict[str, float]]


def _method_config(config: TrainConfig, method: str, M: int) -> TrainConfig:
    prior = config.prior if method == config.method else default_prior(method)
    return replace(config, method=method, prior=prior, m_train=M, m_eval=M, ensemble_size=1)


def run_bench(
    config: TrainConfig,
    *,
    m_values: Sequence[int] = DEFAULT_M_VALUES,
    epochs: int = 5,
    warmup: int = 1,
) -> BenchResult:
    """Per-epoch and prediction times of base, vifo and vi on one network and dataset."""
    splits = prepare_data(config)
    rows = []
    for method in BENCH_METHODS:
        for M in m_values:
            cfg = _method_config(config, method, M)
            trainer = Trainer(cfg, build_spec(cfg, splits.train), seed=cfg.seed)
            timings = epoch_time(
                trainer, splits.train, epochs=epochs, warmup=warmup, label=f"{method}/M={M}"
            )
            model = trainer.model()
            with Stopwatch() as watch:
                model.predict(splits.val.X, M, _eval_rng(cfg))
            rows.append(
                TimingRow(
                    method=method,
                    M=M,
                    epoch_seconds_median=timings.median,
                    epoch_seconds_mean=timings.mean,
                    epoch_seconds_std=timings.std,
                    predict_seconds=watch.seconds,
                    parameter_count=model.parameter_count(),
                )
            )

    fits = {}
    if len(set(m_values)) > 1:
        for method in ("vifo", "vi"):
            xs = [r.M for r in rows if r.method == method]
            ys = [r.epoch_seconds_median for r in rows if r.method == method]
            fit = linregress(xs, ys)
            fits[method] = {"slope": float(fit.slope), "r_squared": float(fit.rvalue**2)}
            log.info(
                "timing-fit method=%s slope_ms=%.4f r2=%.4f",
                method,
                fit.slope * 1_000,
                fit.rvalue**2,
            )
    return BenchResult(rows=rows, fits=fits)


@dataclass
class SinusoidDemo:
    x: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    prior_mean: np.ndarray | None
    prior_std: np.ndarray | None
    vi_prior_mean: np.ndarray | None
    vi_prior_std: np.ndarray | None
    train_rmse: float
    gap_std: float


def sinusoid_config(
    eta_aux: float = 1.0, seed: int = 0, epochs: int = 2000, n: int = 100
) -> TrainConfig:
    """Five hidden layers of 50 units, exp link, collapsed-mean prior with shrinkage 0.05."""
    return TrainConfig(
        method="vifo",
        prior=CollapsedMean.from_ratio(0.3, 0.05),
        eta=0.1,
        eta_aux=eta_aux,
        epochs=epochs,
        batch_size=25,
        seed=seed,
        ensemble_size=1,
        network=NetworkConfig(hidden=(50,) * 5, link="exp"),
        dataset=DatasetConfig(kind="sinusoid", n=n, noise=0.1, standardize=False, seed=seed),
    )


def _band(draws: np.ndarray) -> RegressionPrediction:
    return RegressionPrediction(mean=draws.mean(axis=0), variance=draws.var(axis=0))


def _vifo_prior_band(
    model: MemberModel, config: TrainConfig, X: np.ndarray, n: int, rng: np.random.Generator
) -> RegressionPrediction:
    """Prior draws of the mean output m at X; the collapsed-mean prior centres on the fitted q."""
    assert model.network is not None
    q = VariationalOutput(*forward_heads(model.network, X))
    return _band(sample_prior_z(q, config.prior_spec, n, rng)[..., 0])


def _vi_prior_band(
    spec: MlpSpec, X: np.ndarray, prior_var: float, n: int, rng: np.random.Generator
) -> RegressionPrediction:
    """Mean outputs of plain networks whose weights are drawn from N(0, prior_var)."""
    prior = GaussianWeights.prior(spec, prior_var)
    return _band(np.array([forward_weights(prior.sample(rng), X).data[:, 0] for _ in range(n)]))


def run_sinusoid_demo(
    config: TrainConfig,
    *,
    grid: int = 200,
    prior_samples: int = 0,
    vi_prior_var: float = SINUSOID_VI_PRIOR_VARIANCE,
) -> SinusoidDemo:
    ds = build_dataset(config.dataset)
    trainer = Trainer(config, build_spec(config, ds), seed=config.seed)
    trainer.fit(ds)
    model = trainer.model()
    rng = _eval_rng(config)

    x = sinusoid_grid(grid)
    pred = model.predict(x, config.m_eval, rng)
    assert isinstance(pred, RegressionPrediction)
    prior = vi_prior = None
    if prior_samples:
        prior = _vifo_prior_band(model, config, x, prior_samples, rng)
        vi_prior = _vi_prior_band(model.spec, x, vi_prior_var, prior_samples, rng)

    fitted = model.predict(ds.X, config.m_eval, rng)
    assert isinstance(fitted, RegressionPrediction)
    train_rmse = float(np.sqrt(np.mean((fitted.mean - 2.0 * np.sin(ds.X[:, 0])) ** 2)))
    gap = np.abs(x[:, 0]) < 0.5 * math.pi
    gap_std = float(pred.std[gap].mean())
    log.info(
        "sinusoid eta_aux=%s seed=%d train_rmse=%.4f gap_std=%.4f",
        config.eta_aux,
        config.seed,
        train_rmse,
        gap_std,
    )
    return SinusoidDemo(
        x=x[:, 0],
        mean=pred.mean,
        std=pred.std,
        prior_mean=prior.mean if prior else None,
        prior_std=prior.std if prior else None,
        vi_prior_mean=vi_prior.mean if vi_prior else None,
        vi_prior_std=vi_prior.std if vi_prior else None,
        train_rmse=train_rmse,
        gap_std=gap_std,
    )


# ── CLI ──────────────────────────────────────────────────────────────


def _load(config_path: str | None, **overrides: Any) -> TrainConfig:
    try:
        return load_config(config_path, **overrides)
    except (ConfigError, ValueError) as e:
        raise click.ClickException(str(e)) from None


config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), help="TOML or JSON config file."
)
seed_option = click.option("--seed", type=int, help="Override the run seed.")


@click.command("train")
@config_option
@click.option(
    "--out-dir", type=click.Path(file_okay=False), default="runs/latest", show_default=True
)
@seed_option
@click.option("--eta-aux", type=float, help="Override the auxiliary regularizer weight.")
@click.option("--ensemble-size", type=int, help="Override the number of members.")
@click.option("--threads", type=int, help="Worker threads (default: $VIFO_THREADS).")
def train_command(config_path, out_dir, seed, eta_aux, ensemble_size, threads):
    """Train an ensemble and write models, losses, metrics and a manifest."""
    config = _load(config_path, seed=seed, eta_aux=eta_aux, ensemble_size=ensemble_size)
    try:
        manifest = run_training(config, Path(out_dir), threads=threads)
    except (TrainingError, CsvFormatError, NonFiniteError, ValueError, OSError) as e:
        raise click.ClickException(str(e)) from None
    click.echo(f"Trained {len(manifest.members)} member(s) in {manifest.wall_clock_seconds:.1f}s.")
    for report in manifest.reports:
        click.echo(
            f"  nll={report['nll']:.4f} acc={report['accuracy']:.4f} ece={report['ece']:.4f}"
        )


@click.command("evaluate")
@click.argument("model_dir", type=click.Path(exists=True, file_okay=False))
@click.option(
    "--dataset", "dataset_path", type=click.Path(dir_okay=False), help="CSV to evaluate on."
)
@click.option("--ood", "ood_path", type=click.Path(dir_okay=False), help="CSV of OOD inputs.")
@click.option("--out-dir", type=click.Path(file_okay=False), help="Defaults to MODEL_DIR.")
def evaluate_command(model_dir, dataset_path, ood_path, out_dir):
    """Per-member and ensemble metrics of a trained run."""
    try:
        evaluation = run_evaluation(
            Path(model_dir),
            dataset_path=Path(dataset_path) if dataset_path else None,
            ood_path=Path(ood_path) if ood_path else None,
            out_dir=Path(out_dir) if out_dir else None,
        )
    except (ConfigError, CsvFormatError, ValueError, OSError) as e:
        raise click.ClickException(str(e)) from None
    for row in evaluation.rows:
        auroc = "-" if row.auroc is None else f"{row.auroc:.4f}"
        click.echo(
            f"{row.seed}: nll={row.nll:.4f} acc={row.acc:.4f} ece={row.ece:.4f} "
            f"entropy={row.entropy:.4f} auroc={auroc}"
        )


@click.command("bench")
@config_option
@click.option(
    "--out-dir", type=click.Path(file_okay=False), default="runs/bench", show_default=True
)
@click.option("--epochs", type=int, default=5, show_default=True, help="Timed epochs.")
@click.option("--warmup", type=int, default=1, show_default=True, help="Untimed epochs first.")
@click.option("--m-values", default="1,5,10,20", show_default=True, help="Sample counts to time.")
def bench_command(config_path, out_dir, epochs, warmup, m_values):
    """Time training epochs and prediction for base, vifo and vi."""
    config = _load(config_path)
    try:
        values = [int(v) for v in m_values.split(",") if v.strip()]
        result = run_bench(config, m_values=values, epochs=epochs, warmup=warmup)
    except ValueError as e:
        raise click.ClickException(str(e)) from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "timing.csv", TimingRow.columns(), (r.to_json() for r in result.rows))
    write_json(out / "timing-fit.json", result.fits)
    for row in result.rows:
        click.echo(
            f"{row.method:>4} M={row.M:<3} epoch={row.epoch_seconds_median * 1000:.1f}ms "
            f"predict={row.predict_seconds * 1000:.1f}ms"
        )


@click.command("sinusoid-demo")
@click.option("--eta-aux", type=float, default=1.0, show_default=True)
@seed_option
@click.option("--epochs", type=int, default=2000, show_default=True)
@click.option("--grid", type=int, default=200, show_default=True, help="Points on [-pi, pi].")
@click.option("--prior-samples", type=int, default=0, help="Also emit prior-induced predictions.")
@click.option("--out", type=click.Path(dir_okay=False), default="sinusoid.csv", show_default=True)
def sinusoid_demo_command(eta_aux, seed, epochs, grid, prior_samples, out):
    """Fit the sinusoid with a gap and write the predictive mean and std on a grid."""
    config = sinusoid_config(eta_aux=eta_aux, seed=seed or 0, epochs=epochs)
    try:
        demo = run_sinusoid_demo(config, grid=grid, prior_samples=prior_samples)
    except (TrainingError, ValueError) as e:
        raise click.ClickException(str(e)) from None
    series = {"x": demo.x, "mean": demo.mean, "std": demo.std}
    optional = {
        "prior_mean": demo.prior_mean,
        "prior_std": demo.prior_std,
        "vi_prior_mean": demo.vi_prior_mean,
        "vi_prior_std": demo.vi_prior_std,
    }
    series |= {name: values for name, values in optional.items() if values is not None}
    columns = list(series)
    rows = [{name: values[i] for name, values in series.items()} for i in range(len(demo.x))]
    write_csv(Path(out), columns, ({k: float(v) for k, v in r.items()} for r in rows))
    click.echo(f"Wrote {len(rows)} rows to {out} (train rmse {demo.train_rmse:.3f}).")


def register(group: click.Group):
    for command in (train_command, evaluate_command, bench_command, sinusoid_demo_command):
        group.add_command(command)
