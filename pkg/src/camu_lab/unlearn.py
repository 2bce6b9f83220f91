"""Training, causal unlearning (CaMU) and the reference baselines.

Every routine is deterministic given its inputs and seed: batch orders come
from ``data.batches`` keyed by (seed, epoch), and models start from clones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .data import Dataset, JointDataset, batches


class DivergenceError(FloatingPointError):
    """A loss became non-finite during optimisation."""

    def __init__(self, method: str, detail: str = ""):
        self.method = method
        self.detail = detail
        super().__init__(f"{method}: non-finite loss{': ' + detail if detail else ''}")

    def __reduce__(self):
        return (type(self), (self.method, self.detail))


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.01
    batch_size: int = 32
    seed: int = 0
    architecture: tuple[int, ...] = (784, 128, 64, 10)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        self.architecture = tuple(int(w) for w in self.architecture)


@dataclass
class UnlearnConfig:
    T: int = 5
    learning_rate: float = 0.001
    batch_size: int = 32
    seed: int = 0
    use_counterfactual: bool = True
    use_repr_alignment: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        # CE on R* is never gated, so every flag combination keeps one term alive.


@dataclass
class UnlearnResult:
    model: nn.Model
    wall_time_seconds: float
    loss_trace: list[tuple[float, float]] = field(default_factory=list)


def _check(method: str, value: float) -> float:
    if not np.isfinite(value):
        raise DivergenceError(method)
    return value


def _ce_epochs(
    model: nn.Model,
    dataset: Dataset,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
    method: str,
    epoch_offset: int = 0,
) -> list[float]:
    opt = nn.OptimizerState(model, learning_rate)
    history = []
    for epoch in range(epoch_offset, epoch_offset + epochs):
        total = 0.0
        for rows in batches(len(dataset), batch_size, seed, epoch):
            trace = nn.forward_with_representation(model, dataset.features[rows])
            loss, grad = nn.cross_entropy(trace.logits, dataset.labels[rows])
            total += _check(method, loss) * len(rows)
            nn.backward_and_step(model, opt, (trace, grad, None))
        history.append(total / len(dataset))
    return history


def train(dataset: Dataset, config: TrainConfig, history: Optional[list] = None) -> nn.Model:
    """Mini-batch SGD on mean cross-entropy from a fresh seeded initialisation.

    If ``history`` is given, the mean training loss of each epoch is appended.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    arch = config.architecture
    if arch[0] != dataset.dim:
        raise nn.ShapeError(f"architecture input width {arch[0]} != feature width {dataset.dim}")
    if arch[-1] != dataset.num_classes:
        raise nn.ShapeError(f"architecture output width {arch[-1]} != {dataset.num_classes} classes")
    model = nn.build_model(arch, config.seed)
    losses = _ce_epochs(
        model, dataset, config.epochs, config.learning_rate, config.batch_size, config.seed, "train"
    )
    if history is not None:
        history.extend(losses)
    return model


def retrain(remain: Dataset, config: TrainConfig) -> nn.Model:
    return train(remain, config)


def kl_step_terms(g_u: nn.Model, g_o: nn.Model, S: JointDataset, rows, config: UnlearnConfig):
    """Representation-alignment loss on one batch of tuples.

    Returns ``(loss, terms)`` where ``terms`` is a list of
    ``(trace, None, grad_representation)`` ready for ``nn.backward_and_step``.
    """
    loss, terms = 0.0, []
    if config.use_counterfactual:
        t_f = nn.forward_with_representation(g_u, S.x_f[rows])
        t_cf = nn.forward_with_representation(g_u, S.x_cf[rows])
        value, g_f, g_cf = nn.kl_divergence(t_f.representation, t_cf.representation)
        loss += value
        terms += [(t_f, None, g_f), (t_cf, None, g_cf)]
    if config.use_repr_alignment:
        t_r = nn.forward_with_representation(g_u, S.x_r[rows])
        target = nn.forward_with_representation(g_o, S.x_r[rows]).representation
        value, g_r, _ = nn.kl_divergence(t_r.representation, target, detach_q=True)
        loss += value
        terms.append((t_r, None, g_r))
    return loss, terms


def ce_step_terms(g_u: nn.Model, S: JointDataset, rows, config: UnlearnConfig):
    """Output-alignment loss on one batch: forgetting inputs toward y_f*, R* toward y_r*."""
    loss, terms = 0.0, []
    if config.use_counterfactual:
        t_f = nn.forward_with_representation(g_u, S.x_f[rows])
        value, grad = nn.cross_entropy(t_f.logits, S.y_cf[rows])
        loss += value
        terms.append((t_f, grad, None))
    t_r = nn.forward_with_representation(g_u, S.x_r[rows])
    value, grad = nn.cross_entropy(t_r.logits, S.y_r[rows])
    loss += value
    terms.append((t_r, grad, None))
    return loss, terms


def camu(g_o: nn.Model, S: JointDataset, config: UnlearnConfig) -> UnlearnResult:
    """Alternate a KL step and a CE step on every batch of ``S`` for ``T`` epochs."""
    if len(S) == 0:
        raise ValueError("joint dataset is empty")
    start = time.perf_counter()
    g_u = nn.clone_model(g_o)
    opt = nn.OptimizerState(g_u, config.learning_rate)
    kl_enabled = config.use_counterfactual or config.use_repr_alignment
    trace = []
    for epoch in range(config.T):
        kl_sum = ce_sum = 0.0
        schedule = batches(len(S), config.batch_size, config.seed, epoch)
        for rows in schedule:
            if kl_enabled:
                loss, terms = kl_step_terms(g_u, g_o, S, rows, config)
                kl_sum += _check("camu", loss)
                nn.backward_and_step(g_u, opt, *terms)
            loss, terms = ce_step_terms(g_u, S, rows, config)
            ce_sum += _check("camu", loss)
            nn.backward_and_step(g_u, opt, *terms)
        trace.append((kl_sum / len(schedule), ce_sum / len(schedule)))
    return UnlearnResult(g_u, time.perf_counter() - start, trace)


def finetune(g_o: nn.Model, remain: Dataset, config: UnlearnConfig) -> UnlearnResult:
    if len(remain) == 0:
        raise ValueError("remaining data is empty")
    start = time.perf_counter()
    g_u = nn.clone_model(g_o)
    losses = _ce_epochs(
        g_u, remain, config.T, config.learning_rate, config.batch_size, config.seed, "finetune"
    )
    return UnlearnResult(g_u, time.perf_counter() - start, [(0.0, v) for v in losses])


def neg_grad(
    g_o: nn.Model,
    forget: Dataset,
    remain: Dataset,
    config: UnlearnConfig,
    forget_weight: float = 1.0,
) -> UnlearnResult:
    """Descend CE on remaining batches while ascending CE on forgetting batches.

    One epoch is one pass over the forgetting data; each forgetting batch is
    paired with the next batch of a fresh remaining-data permutation (which
    wraps if the remaining data runs out first).
    """
    if len(remain) == 0 or len(forget) == 0:
        raise ValueError("neg_grad needs non-empty forgetting and remaining data")
    start = time.perf_counter()
    g_u = nn.clone_model(g_o)
    opt = nn.OptimizerState(g_u, config.learning_rate)
    trace = []
    for epoch in range(config.T):
        r_sched = batches(len(remain), config.batch_size, config.seed, epoch)
        f_sched = batches(len(forget), config.batch_size, config.seed, epoch, 1)
        total = 0.0
        for i, f_rows in enumerate(f_sched):
            r_rows = r_sched[i % len(r_sched)]
            t_r = nn.forward_with_representation(g_u, remain.features[r_rows])
            l_r, g_r = nn.cross_entropy(t_r.logits, remain.labels[r_rows])
            terms = [(t_r, g_r, None)]
            loss = l_r
            if forget_weight != 0.0:
                t_f = nn.forward_with_representation(g_u, forget.features[f_rows])
                l_f, g_f = nn.cross_entropy(t_f.logits, forget.labels[f_rows])
                loss -= forget_weight * l_f
                terms.append((t_f, -forget_weight * g_f, None))
            total += _check("neg_grad", loss)
            nn.backward_and_step(g_u, opt, *terms)
        trace.append((0.0, total / len(f_sched)))
    return UnlearnResult(g_u, time.perf_counter() - start, trace)


def timed_retrain(remain: Dataset, config: TrainConfig) -> UnlearnResult:
    start = time.perf_counter()
    model = retrain(remain, config)
    return UnlearnResult(model, time.perf_counter() - start, [])


METHODS: Sequence[str] = (
    "retrain",
    "finetune",
    "neg_grad",
    "camu",
    "camu_ablation_no_counterfactual",
    "camu_ablation_no_repr_alignment",
)
