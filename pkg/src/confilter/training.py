"""Mini-batch SGD with per-parameter update telemetry.

Every optimizer step can record, for a tracked subset of parameters, the
absolute change |p_after - p_before| of each scalar. The per-parameter mean
of those magnitudes over all steps is the update statistic that downstream
mask construction consumes: parameters that keep moving while the model is
being tuned on confounder labels are the ones to remove.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .data import LabeledSet
from .errors import ConfigError, NumericFault
from .network import Component, Model, ParamId, forward
from .tensor import softmax_cross_entropy

__all__ = [
    "TrainConfig",
    "TelemetryLedger",
    "PiVector",
    "sgd_step",
    "train",
    "finalize_pi",
    "write_ledger_csv",
    "read_ledger_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    shuffle_seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be finite, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


class TelemetryLedger:
    """Accumulates |delta| per tracked parameter across optimizer steps.

    Tracks parameters by tag, not by trainability: a frozen tracked
    parameter simply contributes zeros. ``n`` counts optimizer steps, not
    epochs, and increments once per recorded step.
    """

    def __init__(self, param_ids: list[ParamId], tracked_tags: frozenset):
        self.param_ids = list(param_ids)
        self.tracked_tags = frozenset(tracked_tags)
        self.sums = np.zeros(len(self.param_ids))
        self.n = 0

    @classmethod
    def for_model(cls, model: Model, tags: Iterable[Component]) -> "TelemetryLedger":
        tags = frozenset(tags)
        return cls(model.param_ids(tags), tags)

    def record(self, abs_deltas: np.ndarray) -> None:
        if abs_deltas.shape != self.sums.shape:
            raise ConfigError(
                f"delta vector has length {abs_deltas.shape}, ledger tracks {self.sums.shape}"
            )
        self.sums += abs_deltas
        self.n += 1


@dataclass(frozen=True)
class PiVector:
    """Per-parameter mean absolute update magnitude over n steps."""

    param_ids: tuple
    pi: np.ndarray
    n: int


def finalize_pi(ledger: TelemetryLedger) -> PiVector:
    if ledger.n < 1:
        raise ConfigError("no steps recorded")
    return PiVector(param_ids=tuple(ledger.param_ids), pi=ledger.sums / ledger.n, n=ledger.n)


@dataclass
class _SgdState:
    """Momentum buffers keyed by parameter identity; created per training run."""

    momentum: float
    velocities: dict = field(default_factory=dict)

    def velocity(self, param) -> np.ndarray:
        key = id(param)
        if key not in self.velocities:
            self.velocities[key] = np.zeros_like(param.data)
        return self.velocities[key]


def _as_xy(batch):
    if isinstance(batch, LabeledSet):
        return batch.X, batch.y
    X, y = batch
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def sgd_step(
    model: Model,
    batch,
    cfg: TrainConfig,
    ledger: Optional[TelemetryLedger] = None,
    state: Optional[_SgdState] = None,
) -> float:
    """One SGD update over the batch; returns the batch loss.

    With a ledger attached, records |p_after - p_before| for every tracked
    parameter (zeros for frozen ones) and bumps the step counter once.
    """
    X, y = _as_xy(batch)
    if X.shape[0] == 0:
        raise ConfigError("empty batch")
    if state is None:
        state = _SgdState(cfg.momentum)

    model.zero_grad()
    loss = softmax_cross_entropy(forward(model, X), y)
    loss.backward()

    before = model.flat_values(ledger.tracked_tags) if ledger is not None else None

    for p in model.parameters():
        if not p.requires_grad:
            continue
        if cfg.momentum > 0.0:
            v = state.velocity(p)
            v *= cfg.momentum
            v += p.grad
            update = cfg.learning_rate * v
        else:
            update = cfg.learning_rate * p.grad
        p.data -= update
        if not np.all(np.isfinite(p.data)):
            raise NumericFault("parameter update produced non-finite values")

    if ledger is not None:
        after = model.flat_values(ledger.tracked_tags)
        ledger.record(np.abs(after - before))
    return loss.item()


def train(
    model: Model,
    data: LabeledSet,
    cfg: TrainConfig,
    track: Iterable[Component] = (Component.CLASSIFIER,),
) -> tuple[list[float], TelemetryLedger]:
    """Epochs of shuffled mini-batch SGD; returns per-epoch mean loss and the ledger.

    Deterministic given the model parameters and cfg.shuffle_seed: the same
    call from the same checkpoint reproduces parameters and ledger bit for bit.
    """
    n = len(data)
    if n == 0:
        raise ConfigError("empty dataset")
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    k = model.spec.head_classes
    if data.y.min() < 0 or data.y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{data.y.min()}, {data.y.max()}]")

    ledger = TelemetryLedger.for_model(model, track)
    state = _SgdState(cfg.momentum)
    rng = np.random.Generator(np.random.PCG64(cfg.shuffle_seed))
    curve: list[float] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = sgd_step(model, (data.X[idx], data.y[idx]), cfg, ledger, state)
            total += loss * idx.shape[0]
            seen += idx.shape[0]
        curve.append(total / seen)
    return curve, ledger


# -- ledger export -------------------------------------------------------------


_LEDGER_COLUMNS = ["param_layer", "param_offset", "sum_abs_delta", "n", "pi"]


def write_ledger_csv(ledger: TelemetryLedger, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_LEDGER_COLUMNS)
        for (layer, offset), s in zip(ledger.param_ids, ledger.sums):
            pi = s / ledger.n if ledger.n else 0.0
            w.writerow([layer, offset, repr(float(s)), ledger.n, repr(pi)])


def read_ledger_csv(path) -> TelemetryLedger:
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != _LEDGER_COLUMNS:
        raise ConfigError(f"{path} is not a ledger CSV (bad header)")
    ids, sums, n = [], [], 0
    for row in rows[1:]:
        ids.append((int(row[0]), int(row[1])))
        sums.append(float(row[2]))
        n = int(row[3])
    ledger = TelemetryLedger(ids, frozenset())
    ledger.sums = np.asarray(sums)
    ledger.n = n
    return ledger
