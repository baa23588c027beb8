"""Calibration, entropy, likelihood and OOD-detection metrics.

All functions accept either a CategoricalPrediction or a raw [n, K]
probability array.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import entr
from scipy.stats import rankdata

from .core import CategoricalPrediction
from .models import EvalReport

PROB_FLOOR = 1e-12
BINNINGS = ("width", "count")

type Predictions = CategoricalPrediction | np.ndarray


def _probs(preds: Predictions) -> np.ndarray:
    probs = preds.probs if isinstance(preds, CategoricalPrediction) else np.asarray(preds)
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if probs.shape[0] == 0:
        raise ValueError("No predictions")
    return probs


def _labels(labels, n: int, K: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"Expected {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"Labels must lie in [0, {K})")
    return labels.astype(np.int64)


@dataclass(frozen=True)
class CalibrationBin:
    lower: float
    upper: float
    count: int
    accuracy: float
    confidence: float


def calibration_bins(
    preds: Predictions, labels, n_bins: int = 20, binning: str = "width"
) -> list[CalibrationBin]:
    """Confidence bins; a point on an edge belongs to the bin above it."""
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if binning not in BINNINGS:
        raise ValueError(f"binning must be one of {', '.join(BINNINGS)}")
    probs = _probs(preds)
    labels = _labels(labels, len(probs), probs.shape[1])
    confidence = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)

    if binning == "width":
        index = np.minimum(np.floor(confidence * n_bins).astype(np.int64), n_bins - 1)
        groups = [np.flatnonzero(index == b) for b in range(n_bins)]
        edges = [(b / n_bins, (b + 1) / n_bins) for b in range(n_bins)]
    else:
        order = np.argsort(confidence, kind="stable")
        groups = list(np.array_split(order, n_bins))
        edges = [
            (float(confidence[g].min()), float(confidence[g].max())) if len(g) else (math.nan,) * 2
            for g in groups
        ]

    bins = []
    for members, (lower, upper) in zip(groups, edges, strict=True):
        if len(members) == 0:
            bins.append(CalibrationBin(lower, upper, 0, math.nan, math.nan))
            continue
        bins.append(
            CalibrationBin(
                lower=lower,
                upper=upper,
                count=len(members),
                accuracy=float(correct[members].mean()),
                confidence=float(confidence[members].mean()),
            )
        )
    return bins


def ece(preds: Predictions, labels, n_bins: int = 20, binning: str = "width") -> float:
    bins = calibration_bins(preds, labels, n_bins, binning)
    n = sum(b.count for b in bins)
    return float(
        sum(b.count / n * abs(b.accuracy - b.confidence) for b in bins if b.count)
    )


def mean_entropy(preds: Predictions) -> float:
    """Average predictive entropy in nats."""
    return float(entr(_probs(preds)).sum(axis=1).mean())


def auroc(id_preds: Predictions, ood_preds: Predictions) -> float:
    """Area under the ROC curve separating in-distribution (positive) from OOD.

    Score is the maximum predicted probability. The area is the Mann-Whitney
    rank-sum statistic over the pooled scores, ranked with
    ``scipy.stats.rankdata`` so that tied scores share their average rank.
    """
    id_scores = _probs(id_preds).max(axis=1)
    ood_scores = _probs(ood_preds).max(axis=1)
    return auroc_from_scores(id_scores, ood_scores)


def auroc_from_scores(positive: np.ndarray, negative: np.ndarray) -> float:
    n_pos, n_neg = len(positive), len(negative)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one score in each class")
    ranks = rankdata(np.concatenate([positive, negative]))
    rank_sum = ranks[:n_pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def nll_and_accuracy(preds: Predictions, labels) -> tuple[float, float]:
    probs = _probs(preds)
    labels = _labels(labels, len(probs), probs.shape[1])
    picked = np.maximum(probs[np.arange(len(labels)), labels], PROB_FLOOR)
    nll = float(-np.log(picked).mean())
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    return nll, accuracy


def evaluate_predictions(
    preds: Predictions,
    labels,
    *,
    ood_preds: Predictions | None = None,
    n_bins: int = 20,
    binning: str = "width",
    seconds: float = 0.0,
) -> EvalReport:
    nll, accuracy = nll_and_accuracy(preds, labels)
    return EvalReport(
        nll=nll,
        accuracy=accuracy,
        ece=ece(preds, labels, n_bins, binning),
        mean_entropy=mean_entropy(preds),
        auroc=auroc(preds, ood_preds) if ood_preds is not None else None,
        n_examples=len(_probs(preds)),
        wall_clock_seconds=seconds,
    )
