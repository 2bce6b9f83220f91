"""Unlearning metrics: split accuracies, loss-threshold MIA, relearn curves.

The membership attack is a single loss threshold: pick the cut that best
separates members from non-members on a calibration half, report balanced
accuracy on the held-out half. Absolute values are only comparable across
methods evaluated on this same harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import nn
from . import rng as rng_streams
from .data import Dataset
from .unlearn import UnlearnConfig, _ce_epochs

TASKS = ("random_removal", "class_removal")
TASK_METRICS = {
    "random_removal": ("R_tr", "F_tr", "Ts", "mia"),
    "class_removal": ("R_ts", "F_ts", "mia"),
}
METRIC_FIELDS = ("R_tr", "F_tr", "Ts", "R_ts", "F_ts", "mia")


@dataclass
class Splits:
    forget: Dataset
    remain: Dataset
    test: Dataset
    forget_classes: tuple[int, ...] = ()

    def test_remaining_classes(self) -> Dataset:
        return self.test.subset(np.flatnonzero(~np.isin(self.test.labels, self.forget_classes)))

    def test_forgotten_classes(self) -> Dataset:
        return self.test.subset(np.flatnonzero(np.isin(self.test.labels, self.forget_classes)))


@dataclass
class MetricsReport:
    method: str
    task: str
    seed: object  # int, or a list of seeds once averaged
    R_tr: Optional[float] = None
    F_tr: Optional[float] = None
    Ts: Optional[float] = None
    R_ts: Optional[float] = None
    F_ts: Optional[float] = None
    mia: Optional[float] = None
    wall_time_seconds: Optional[float] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        for name in METRIC_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            if name not in TASK_METRICS[self.task]:
                raise ValueError(f"metric {name} does not belong to task {self.task}")
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"{name}={value} is not a percentage")

    def metrics(self) -> dict[str, Optional[float]]:
        return {name: getattr(self, name) for name in METRIC_FIELDS}


@dataclass
class RelearnCurve:
    gaps: list[float] = field(default_factory=list)

    @property
    def spread(self) -> float:
        return max(self.gaps) - min(self.gaps)


def accuracy(model: nn.Model, dataset: Dataset, batch_size: int = 4096) -> float:
    """Percentage of rows whose argmax logit matches the label.

    ``np.argmax`` returns the first maximum, so ties go to the lowest class.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    correct = 0
    for lo in range(0, n, batch_size):
        logits = nn.predict(model, dataset.features[lo : lo + batch_size])
        correct += int((logits.argmax(axis=1) == dataset.labels[lo : lo + batch_size]).sum())
    return 100.0 * correct / n


def sample_losses(model: nn.Model, dataset: Dataset) -> np.ndarray:
    return nn.per_sample_cross_entropy(nn.predict(model, dataset.features), dataset.labels)


def _balanced_accuracy(threshold: float, members: np.ndarray, nonmembers: np.ndarray) -> float:
    tpr = np.mean(members <= threshold)
    tnr = np.mean(nonmembers > threshold)
    return 0.5 * (tpr + tnr)


def threshold_attack(member_losses, nonmember_losses, seed: int = 0) -> float:
    """Balanced accuracy (%) of the best calibration-half loss threshold.

    A sample is predicted "member" when its loss is at or below the threshold.
    """
    m = np.asarray(member_losses, dtype=np.float64)
    o = np.asarray(nonmember_losses, dtype=np.float64)
    if m.size < 2 or o.size < 2:
        raise ValueError("membership attack needs at least two members and two non-members")
    m = m[rng_streams.stream(seed, "mia", 0).permutation(m.size)]
    o = o[rng_streams.stream(seed, "mia", 1).permutation(o.size)]
    m_cal, m_eval = m[: m.size // 2], m[m.size // 2 :]
    o_cal, o_eval = o[: o.size // 2], o[o.size // 2 :]

    candidates = np.unique(np.concatenate([m_cal, o_cal, [-np.inf]]))
    # Vectorised balanced accuracy for every candidate threshold.
    m_sorted, o_sorted = np.sort(m_cal), np.sort(o_cal)
    tpr = np.searchsorted(m_sorted, candidates, side="right") / m_sorted.size
    tnr = 1.0 - np.searchsorted(o_sorted, candidates, side="right") / o_sorted.size
    best = candidates[int(np.argmax(0.5 * (tpr + tnr)))]
    return float(100.0 * _balanced_accuracy(best, m_eval, o_eval))


def mia_success_rate(model: nn.Model, members: Dataset, nonmembers: Dataset, seed: int = 0) -> float:
    if len(members) < 2 or len(nonmembers) < 2:
        raise ValueError("membership attack needs at least two members and two non-members")
    return threshold_attack(sample_losses(model, members), sample_losses(model, nonmembers), seed)


def _mia_for_splits(model: nn.Model, splits: Splits, seed: int) -> float:
    n = min(len(splits.forget), len(splits.test))
    gen = rng_streams.stream(seed, "mia", 2)
    members = splits.forget
    if len(members) > n:
        members = members.subset(np.sort(gen.choice(len(members), n, replace=False)))
    nonmembers = splits.test.subset(np.sort(gen.choice(len(splits.test), n, replace=False)))
    return mia_success_rate(model, members, nonmembers, seed)


def evaluate(
    method: str,
    model: nn.Model,
    splits: Splits,
    task: str,
    seed: int = 0,
    wall_time_seconds: Optional[float] = None,
) -> MetricsReport:
    """Fill in the metric set of ``task`` for one unlearned model."""
    if task == "random_removal":
        return MetricsReport(
            method, task, seed,
            R_tr=accuracy(model, splits.remain),
            F_tr=accuracy(model, splits.forget),
            Ts=accuracy(model, splits.test),
            mia=_mia_for_splits(model, splits, seed),
            wall_time_seconds=wall_time_seconds,
        )
    if task == "class_removal":
        if not splits.forget_classes:
            raise ValueError("class_removal evaluation needs forget_classes")
        return MetricsReport(
            method, task, seed,
            R_ts=accuracy(model, splits.test_remaining_classes()),
            F_ts=accuracy(model, splits.test_forgotten_classes()),
            mia=_mia_for_splits(model, splits, seed),
            wall_time_seconds=wall_time_seconds,
        )
    raise ValueError(f"unknown task {task!r}")


def _gap(model: nn.Model, splits: Splits, task: str) -> float:
    if task == "random_removal":
        return accuracy(model, splits.remain) - accuracy(model, splits.forget)
    return accuracy(model, splits.test_remaining_classes()) - accuracy(
        model, splits.test_forgotten_classes()
    )


def relearn_curve(
    model: nn.Model,
    splits: Splits,
    relearn_epochs: int,
    config: UnlearnConfig,
    task: str,
) -> RelearnCurve:
    """Fine-tune a copy of ``model`` on the remaining data, tracking the R - F accuracy gap.

    Gaps use training accuracies for random removal and per-class test
    accuracies for class removal. Index 0 is the gap before relearning.
    """
    if relearn_epochs < 1:
        raise ValueError("relearn_epochs must be >= 1")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    work = nn.clone_model(model)
    gaps = [_gap(work, splits, task)]
    for epoch in range(relearn_epochs):
        # One epoch at a time with a per-epoch stream key keeps schedules distinct.
        _ce_epochs(
            work, splits.remain, 1, config.learning_rate, config.batch_size,
            config.seed, "relearn", epoch_offset=epoch,
        )
        gaps.append(_gap(work, splits, task))
    return RelearnCurve(gaps)


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Per-metric arithmetic mean over seeds; ``seed`` becomes the list of seeds."""
    if not reports:
        raise ValueError("nothing to average")
    method, task = reports[0].method, reports[0].task
    if any(r.method != method or r.task != task for r in reports):
        raise ValueError("reports mix methods or tasks")
    seeds = []
    for r in reports:
        seeds.extend(r.seed if isinstance(r.seed, list) else [r.seed])
    out = {}
    for name in METRIC_FIELDS + ("wall_time_seconds",):
        values = [getattr(r, name) for r in reports]
        present = [v for v in values if v is not None]
        if present and len(present) != len(values):
            raise ValueError(f"metric {name} is missing from some reports")
        out[name] = math.fsum(present) / len(present) if present else None
    return MetricsReport(method, task, seeds, **out)


def report_fields() -> list[str]:
    return [f.name for f in fields(MetricsReport)]
