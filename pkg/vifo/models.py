from dataclasses import asdict, dataclass, field, fields
from typing import Any, ClassVar


@dataclass(kw_only=True)
class Record:
    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(kw_only=True)
class EvalReport(Record):
    nll: float
    accuracy: float
    ece: float
    mean_entropy: float
    auroc: float | None = None
    n_examples: int
    wall_clock_seconds: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.ece < 0:
            raise ValueError(f"ece {self.ece} is negative")
        if self.auroc is not None and not 0.0 <= self.auroc <= 1.0:
            raise ValueError(f"auroc {self.auroc} outside [0, 1]")


@dataclass(kw_only=True)
class MetricRow(Record):
    """One row of metrics.csv."""

    method: str
    prior: str
    eta: float
    eta_aux: float
    seed: int | str
    nll: float
    acc: float
    ece: float
    entropy: float
    auroc: float | None
    seconds: float

    @classmethod
    def from_report(cls, report: EvalReport, **labels: Any) -> "MetricRow":
        return cls(
            nll=report.nll,
            acc=report.accuracy,
            ece=report.ece,
            entropy=report.mean_entropy,
            auroc=report.auroc,
            seconds=report.wall_clock_seconds,
            **labels,
        )


@dataclass(kw_only=True)
class TimingRow(Record):
    """One row of timing.csv."""

    method: str
    M: int
    epoch_seconds_median: float
    epoch_seconds_mean: float
    epoch_seconds_std: float
    predict_seconds: float
    parameter_count: int


@dataclass(kw_only=True)
class MemberRecord(Record):
    index: int
    seed: int
    model_file: str
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


@dataclass(kw_only=True)
class RunManifest(Record):
    FILE_NAME: ClassVar[str] = "manifest.json"

    version: str
    config: dict[str, Any]
    dataset: dict[str, Any]
    members: list[MemberRecord]
    wall_clock_seconds: float
    created_at: str
    reports: list[dict[str, Any]] = field(default_factory=list)

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "RunManifest":
        return cls(
            version=data["version"],
            config=data["config"],
            dataset=data["dataset"],
            members=[MemberRecord(**member) for member in data["members"]],
            wall_clock_seconds=data["wall_clock_seconds"],
            created_at=data["created_at"],
            reports=data.get("reports", []),
        )
