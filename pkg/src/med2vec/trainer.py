"""Mini-batch Adadelta training over the concatenated visit stream.

Context windows never cross patient boundaries: neighbors of a visit come
only from its own patient's ordered visit sequence, truncated at both ends.
Patient order is reshuffled every epoch; visit order inside a patient is
preserved.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .corpus import Corpus, GrouperMap, Visit
from .model import (
    Gradients,
    LossBreakdown,
    ModelParams,
    NonFiniteLossError,
    backward,
    init_params,
)
from .validation import derive_seed


class TrainingDivergedError(RuntimeError):
    """Training aborted because a loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; all randomness flows from ``seed``."""

    code_dim: int = 40
    visit_dim: int = 40
    window: int = 1
    epochs: int = 10
    batch_size: int = 1000
    alpha: float = 1.0
    seed: int = 0
    adadelta_rho: float = 0.95
    adadelta_eps: float = 1e-6
    use_grouper: bool = True

    def __post_init__(self):
        if self.code_dim < 1 or self.visit_dim < 1:
            raise ValueError("embedding sizes must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0.0 <= self.adadelta_rho < 1.0:
            raise ValueError("adadelta_rho must lie in [0, 1)")
        if self.adadelta_eps <= 0:
            raise ValueError("adadelta_eps must be positive")


@dataclass
class OptimizerState:
    """Decaying accumulators of squared gradients and squared updates."""

    sq_grad: dict[str, np.ndarray]
    sq_update: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            sq_grad={k: np.zeros_like(v) for k, v in params.arrays().items()},
            sq_update={k: np.zeros_like(v) for k, v in params.arrays().items()},
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    total_loss: float
    visit_loss: float
    code_loss: float
    seconds: float


@dataclass
class TrainLog:
    """One record per completed epoch plus the configuration that produced it."""

    records: list[EpochRecord] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(Path(path), "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["epoch", "total", "visit", "code", "seconds"])
            for rec in self.records:
                writer.writerow(
                    [rec.epoch, repr(rec.total_loss), repr(rec.visit_loss),
                     repr(rec.code_loss), repr(rec.seconds)]
                )


def _target_matrix(corpus: Corpus, grouper: GrouperMap | None) -> np.ndarray:
    """(total_visits, n_targets) multi-hot targets, grouped when a grouper is given."""
    n_targets = grouper.n_groups if grouper is not None else len(corpus.vocabulary)
    targets = np.zeros((corpus.total_visits, n_targets), dtype=np.float64)
    for t, visit in enumerate(corpus.iter_visits()):
        if grouper is not None:
            for c in visit.codes:
                if c not in grouper.group_of:
                    raise ValueError(f"code {c} has no group")
                targets[t, grouper.group_of[c]] = 1.0
        else:
            targets[t, list(visit.codes)] = 1.0
    return targets


def make_batches(
    corpus: Corpus,
    batch_size: int,
    seed: int,
    epoch: int,
    *,
    window: int = 1,
    grouper: GrouperMap | None = None,
) -> Iterator[list[tuple[Visit, np.ndarray]]]:
    """Yield batches of (visit, window-target matrix) pairs for one epoch.

    Patients are shuffled by ``seed XOR epoch``; every visit is paired with
    the (grouped) multi-hot vectors of its neighbors at offsets -window ..
    window, excluding 0 and truncated at its patient's boundaries.  The last
    batch may be smaller than ``batch_size``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if window < 1:
        raise ValueError("window must be >= 1")
    targets = _target_matrix(corpus, grouper)
    visits = list(corpus.iter_visits())
    spans = []
    start = 0
    for patient in corpus.patients:
        spans.append((start, start + len(patient)))
        start += len(patient)

    order = np.random.default_rng(int(seed) ^ int(epoch)).permutation(len(spans))
    batch: list[tuple[Visit, np.ndarray]] = []
    for p in order:
        lo, hi = spans[p]
        for t in range(lo, hi):
            neighbors = [
                t + off
                for off in range(-window, window + 1)
                if off != 0 and lo <= t + off < hi
            ]
            batch.append((visits[t], targets[neighbors]))
            if len(batch) == batch_size:
                yield batch
                batch = []
    if batch:
        yield batch


def adadelta_step(
    params: ModelParams,
    grads: Gradients,
    state: OptimizerState,
    rho: float = 0.95,
    eps: float = 1e-6,
) -> tuple[ModelParams, OptimizerState]:
    """One Adadelta update, in place, over all six parameter arrays.

    Per scalar: E[g2] <- rho E[g2] + (1-rho) g2; delta = -sqrt(E[dx2]+eps) /
    sqrt(E[g2]+eps) * g; E[dx2] <- rho E[dx2] + (1-rho) delta^2; theta += delta.
    """
    for name, grad in grads.arrays().items():
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        sq_grad = state.sq_grad[name]
        sq_update = state.sq_update[name]
        sq_grad *= rho
        sq_grad += (1.0 - rho) * grad * grad
        delta = -np.sqrt(sq_update + eps) / np.sqrt(sq_grad + eps) * grad
        sq_update *= rho
        sq_update += (1.0 - rho) * delta * delta
        getattr(params, name).__iadd__(delta)
    return params, state


def train(
    corpus: Corpus,
    grouper: GrouperMap | None,
    config: TrainConfig,
) -> tuple[ModelParams, TrainLog]:
    """Run the full optimization; deterministic given (corpus, config).

    Targets are grouped multi-hot vectors when ``config.use_grouper`` is set
    (a grouper is then required), otherwise raw code multi-hot vectors.
    Raises :class:`TrainingDivergedError` with the epoch/batch coordinates if
    a loss becomes non-finite.
    """
    if config.use_grouper and grouper is None:
        raise ValueError("config.use_grouper is set but no grouper was given")
    if not config.use_grouper and grouper is not None:
        raise ValueError("a grouper was given but config.use_grouper is off")

    n_codes = len(corpus.vocabulary)
    n_targets = grouper.n_groups if grouper is not None else n_codes
    params = init_params(
        n_codes=n_codes,
        code_dim=config.code_dim,
        visit_dim=config.visit_dim,
        demo_dim=corpus.demo_dim,
        n_targets=n_targets,
        seed=derive_seed(config.seed, "init"),
    )
    state = OptimizerState.zeros(params)
    shuffle_seed = derive_seed(config.seed, "shuffle")
    log = TrainLog(
        metadata={
            "optimizer": "adadelta",
            "adadelta_rho": config.adadelta_rho,
            "adadelta_eps": config.adadelta_eps,
            "init": "uniform(-r, r), r = sqrt(6 / (fan_in + fan_out)), zero biases",
            "code_dim": config.code_dim,
            "visit_dim": config.visit_dim,
            "window": config.window,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "alpha": config.alpha,
            "seed": config.seed,
            "use_grouper": config.use_grouper,
            "n_codes": n_codes,
            "n_targets": n_targets,
            "total_visits": corpus.total_visits,
        },
    )

    for epoch in range(config.epochs):
        started = time.perf_counter()
        visit_sum = code_sum = total_sum = 0.0
        seen = 0
        batches = make_batches(
            corpus,
            config.batch_size,
            shuffle_seed,
            epoch,
            window=config.window,
            grouper=grouper,
        )
        for b, batch in enumerate(batches):
            try:
                losses, grads = backward(batch, params, config.alpha)
            except NonFiniteLossError as exc:
                raise TrainingDivergedError(
                    f"diverged at epoch {epoch}, batch {b}: {exc}"
                ) from exc
            adadelta_step(params, grads, state, config.adadelta_rho, config.adadelta_eps)
            visit_sum += losses.visit_loss * len(batch)
            code_sum += losses.code_loss * len(batch)
            total_sum += losses.total * len(batch)
            seen += len(batch)
        log.records.append(
            EpochRecord(
                epoch=epoch,
                total_loss=total_sum / seen,
                visit_loss=visit_sum / seen,
                code_loss=code_sum / seen,
                seconds=time.perf_counter() - started,
            )
        )
    return params, log
