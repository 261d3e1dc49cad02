"""Training-set optimization: drop every sample whose removal is predicted to lower validation loss.

All influences are scored once against the fixed pre-trained model; removals
do not feed back into later scores.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .influence import IhvpStrategy, influence_scores, resolve_reference
from .model import GradEngine

__all__ = [
    "InfluenceReport",
    "SampleRecord",
    "AllDroppedError",
    "DropFractionExceededError",
    "threshold_policy",
    "data_dropout",
    "write_report",
    "read_report",
]


class AllDroppedError(RuntimeError):
    pass


class DropFractionExceededError(RuntimeError):
    pass


def threshold_policy(influence: float) -> str:
    """Strictly positive influence drops; zero keeps."""
    return "drop" if influence > 0 else "keep"


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    influence: float
    decision: str


@dataclass
class InfluenceReport:
    records: list[SampleRecord]
    summary: dict = field(default_factory=dict)

    @property
    def n_dropped(self) -> int:
        return sum(r.decision == "drop" for r in self.records)

    def dropped_ids(self) -> set[int]:
        return {r.sample_id for r in self.records if r.decision == "drop"}

    def influences(self) -> np.ndarray:
        return np.array([r.influence for r in self.records])

    def to_lines(self) -> list[str]:
        lines = [json.dumps(self.summary, sort_keys=True)]
        for r in self.records:
            # repr(float) is the shortest string that round-trips the double
            lines.append(f'{{"id":{r.sample_id},"influence":{float(r.influence)!r},"decision":"{r.decision}"}}')
        return lines


def write_report(report: InfluenceReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(report.to_lines()) + "\n")


def read_report(path) -> InfluenceReport:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines:
        raise ValueError(f"{path}: empty report")
    summary = json.loads(lines[0])
    records = []
    for ln in lines[1:]:
        obj = json.loads(ln)
        records.append(SampleRecord(int(obj["id"]), float(obj["influence"]), obj["decision"]))
    return InfluenceReport(records, summary)


def data_dropout(
    pretrained: GradEngine,
    train: Dataset,
    val: Dataset,
    strategy: IhvpStrategy,
    ref_mode="all",
    max_drop_fraction: float = 0.5,
    checkpoint_digest: str | None = None,
) -> tuple[Dataset, InfluenceReport]:
    """Score ``train`` against ``val`` with the pre-trained model and remove positive-influence samples.

    Returns the optimized set (original order and ids preserved) and a report
    with one record per input sample.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if train.dim != pretrained.spec.input_dim:
        raise ValueError(f"training features have dim {train.dim}, model expects {pretrained.spec.input_dim}")
    ref = resolve_reference(val, ref_mode)
    scores = influence_scores(pretrained, train, val, ref, strategy)
    decisions = [threshold_policy(float(v)) for v in scores]
    keep = np.array([d == "keep" for d in decisions])
    n_drop = int((~keep).sum())
    if n_drop == len(train):
        raise AllDroppedError("every training sample has positive influence; refusing to return an empty set")
    if n_drop > max_drop_fraction * len(train):
        raise DropFractionExceededError(
            f"{n_drop} of {len(train)} samples would be dropped, above max_drop_fraction={max_drop_fraction}; "
            "check that the pre-trained checkpoint matches this data"
        )
    records = [
        SampleRecord(int(i), float(v), d) for i, v, d in zip(train.ids, scores, decisions)
    ]
    summary = {
        "kind": "influence_report",
        "n_in": len(train),
        "n_dropped": n_drop,
        "n_kept": len(train) - n_drop,
        "strategy": strategy.describe(),
        "reference": ref.describe(),
        "n_reference": len(ref.indices),
        "damping": strategy.damping,
        "seed": strategy.seed,
        "checkpoint_digest": checkpoint_digest,
        "single_pass": True,
    }
    return train.subset(np.flatnonzero(keep)), InfluenceReport(records, summary)
