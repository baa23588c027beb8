import logging
import statistics
import time
from collections.abc import Callable
from dataclasses import dataclass, field

log = logging.getLogger(__name__)


@dataclass
class Stopwatch:
    started_at: float = field(default_factory=time.perf_counter)
    seconds: float = 0.0

    def __enter__(self) -> "Stopwatch":
        self.started_at = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self.started_at


@dataclass(kw_only=True)
class EpochTimings:
    samples: list[float]
    median: float
    mean: float
    std: float

    @classmethod
    def from_samples(cls, samples: list[float]) -> "EpochTimings":
        if not samples:
            raise ValueError("No timing samples")
        std = statistics.stdev(samples) if len(samples) > 1 else 0.0
        return cls(
            samples=list(samples),
            median=statistics.median(samples),
            mean=statistics.fmean(samples),
            std=std,
        )


def time_epochs(
    run_epoch: Callable[[], object], *, epochs: int = 5, warmup: int = 1, label: str = "-"
) -> EpochTimings:
    """Wall-clock ``epochs`` calls of ``run_epoch`` after ``warmup`` untimed calls."""
    if epochs < 1:
        raise ValueError("Need at least one timed epoch")
    for _ in range(warmup):
        run_epoch()

    samples = []
    for _ in range(epochs):
        with Stopwatch() as watch:
            run_epoch()
        samples.append(watch.seconds)

    timings = EpochTimings.from_samples(samples)
    log.info(
        "timing label=%s epochs=%d median_ms=%.2f mean_ms=%.2f std_ms=%.2f",
        label,
        epochs,
        timings.median * 1_000,
        timings.mean * 1_000,
        timings.std * 1_000,
    )
    return timings
