"""The two-phase confounder-filtering pipeline.

Phase 1 trains the full model on task labels. Phase 2 takes a copy, swaps
the head for a confounder-label classifier, freezes the representation, and
retrains the classifier component while recording per-parameter update
magnitudes. Classifier weights that moved the most are the ones carrying
confounder information; a binary mask zeroes them out of the *original*
task model, which keeps its task head and is then ready for prediction
without the confounder shortcut.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import LabeledSet
from .errors import ConfigError
from .network import Component, Model, ModelSpec, build_model, forward, replace_head, set_trainable
from .training import PiVector, TelemetryLedger, TrainConfig, finalize_pi, train
from .util import derive_seed

__all__ = [
    "MaskStrategy",
    "FilterMask",
    "FilteredModel",
    "Phase2Result",
    "PipelineResult",
    "phase2_train",
    "build_mask_threshold",
    "build_mask_bernoulli",
    "build_mask",
    "apply_mask",
    "run_cf_pipeline",
    "write_mask_csv",
]

THRESHOLD = "threshold"
BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class MaskStrategy:
    kind: str = THRESHOLD
    drop_fraction: float = 0.20
    bernoulli_seed: int = 0

    def __post_init__(self):
        if self.kind not in (THRESHOLD, BERNOULLI):
            raise ConfigError(f"unknown mask strategy {self.kind!r}")
        if not 0.0 <= self.drop_fraction <= 1.0:
            raise ConfigError(f"drop_fraction must lie in [0, 1], got {self.drop_fraction}")


@dataclass(frozen=True)
class FilterMask:
    """Keep/remove bits aligned with the classifier ParamIds (1 keep, 0 remove)."""

    param_ids: tuple
    bits: np.ndarray
    strategy: MaskStrategy
    tau: Optional[float] = None

    @property
    def zeros(self) -> int:
        return int((self.bits == 0).sum())


@dataclass(frozen=True)
class FilteredModel:
    """Task model with masked classifier weights, plus where it came from."""

    model: Model
    mask: FilterMask
    source: Model


@dataclass(frozen=True)
class Phase2Result:
    pi: PiVector
    confounder_accuracy: float
    ledger: TelemetryLedger
    model: Model  # the confounder-head copy, useful for saliency analysis


@dataclass(frozen=True)
class PipelineResult:
    vanilla: Model
    filtered: FilteredModel
    pi: PiVector
    mask: FilterMask
    phase1_ledger: TelemetryLedger
    phase2: Phase2Result
    phase1_curve: tuple
    phase2_curve: tuple


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def build_mask_threshold(pi: PiVector, rho: float) -> FilterMask:
    """Drop the round(rho * len) parameters with the largest update statistic.

    Ties break by ascending ParamId (the earlier parameter is dropped
    first). ``tau`` records the smallest dropped value, +inf when rho = 0.
    """
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    p = len(pi.pi)
    if p == 0:
        raise ConfigError("empty update statistic")
    d = _round_half_up(rho * p)
    bits = np.ones(p, dtype=np.uint8)
    # stable argsort on -pi: ties come out in ascending ParamId order
    order = np.argsort(-pi.pi, kind="stable")
    dropped = order[:d]
    bits[dropped] = 0
    tau = float(pi.pi[dropped].min()) if d > 0 else float("inf")
    return FilterMask(
        param_ids=tuple(pi.param_ids),
        bits=bits,
        strategy=MaskStrategy(kind=THRESHOLD, drop_fraction=rho),
        tau=tau,
    )


def build_mask_bernoulli(pi: PiVector, seed: int) -> FilterMask:
    """Drop each parameter independently with probability given by min-max
    normalized pi (all-keep when pi is constant)."""
    p = len(pi.pi)
    if p == 0:
        raise ConfigError("empty update statistic")
    lo, hi = float(pi.pi.min()), float(pi.pi.max())
    norm = np.zeros(p) if hi == lo else (pi.pi - lo) / (hi - lo)
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.random(p)  # consumed in ascending ParamId order
    bits = (u >= norm).astype(np.uint8)
    return FilterMask(
        param_ids=tuple(pi.param_ids),
        bits=bits,
        strategy=MaskStrategy(kind=BERNOULLI, bernoulli_seed=seed),
        tau=None,
    )


def build_mask(pi: PiVector, strategy: MaskStrategy) -> FilterMask:
    if strategy.kind == THRESHOLD:
        return build_mask_threshold(pi, strategy.drop_fraction)
    return build_mask_bernoulli(pi, strategy.bernoulli_seed)


def apply_mask(model_hat: Model, mask: FilterMask) -> FilteredModel:
    """Elementwise keep/zero over the classifier parameters of a copy.

    Kept entries stay bit-identical; representation and head parameters are
    never touched. The input model is left unmodified.
    """
    expected = model_hat.num_params((Component.CLASSIFIER,))
    if len(mask.bits) != expected:
        raise ConfigError(f"mask length {len(mask.bits)} does not match {expected} classifier parameters")
    filtered = model_hat.clone()
    pos = 0
    for _, _, t, _ in filtered.param_entries((Component.CLASSIFIER,)):
        chunk = mask.bits[pos : pos + t.size].reshape(t.shape)
        t.data[...] = np.where(chunk == 1, t.data, 0.0)
        pos += t.size
    return FilteredModel(model=filtered, mask=mask, source=model_hat)


def phase2_train(
    model_hat: Model,
    confounder_data: LabeledSet,
    cfg: TrainConfig,
    head_seed: int,
    num_classes: Optional[int] = None,
) -> Phase2Result:
    """Confounder-prediction phase on a copy of the trained task model.

    The copy gets a fresh head sized for the confounder labels, the
    representation is frozen, and classifier updates are recorded. Returns
    the finalized update statistic and the copy's accuracy on its own
    training labels; ``model_hat`` itself is untouched.
    """
    if num_classes is None:
        num_classes = max(int(confounder_data.y.max()) + 1, 2)
    model = replace_head(model_hat, num_classes, head_seed)
    set_trainable(model, {Component.CLASSIFIER, Component.HEAD})
    curve, ledger = train(model, confounder_data, cfg, track=(Component.CLASSIFIER,))
    if ledger.n == 0:
        raise ConfigError("phase 2 recorded no optimizer steps (epochs = 0?)")
    from .harness import evaluate  # local import: harness depends on this module

    acc = evaluate(model, confounder_data)
    return Phase2Result(pi=finalize_pi(ledger), confounder_accuracy=acc, ledger=ledger, model=model)


def run_cf_pipeline(
    task_data: LabeledSet,
    confounder_data: LabeledSet,
    spec: ModelSpec,
    cfg1: TrainConfig,
    cfg2: TrainConfig,
    strategy: MaskStrategy,
    head_seed: Optional[int] = None,
) -> PipelineResult:
    """Phase 1, phase 2, mask construction, and filtering, end to end.

    The task and confounder sets only need to share an input shape; no
    sample correspondence is assumed. The returned vanilla model is the
    phase-1 checkpoint itself (phase 2 runs on a copy).
    """
    if task_data.X.shape[1:] != confounder_data.X.shape[1:]:
        raise ConfigError(
            f"task and confounder inputs disagree: {task_data.X.shape[1:]} vs {confounder_data.X.shape[1:]}"
        )
    if head_seed is None:
        head_seed = derive_seed(spec.seed, "confounder-head")

    vanilla = build_model(spec, task_data.X.shape[1:])
    set_trainable(vanilla, set(Component))
    curve1, ledger1 = train(vanilla, task_data, cfg1, track=(Component.CLASSIFIER,))

    p2 = phase2_train(vanilla, confounder_data, cfg2, head_seed)
    mask = build_mask(p2.pi, strategy)
    filtered = apply_mask(vanilla, mask)
    return PipelineResult(
        vanilla=vanilla,
        filtered=filtered,
        pi=p2.pi,
        mask=mask,
        phase1_ledger=ledger1,
        phase2=p2,
        phase1_curve=tuple(curve1),
        phase2_curve=tuple(p2.ledger.n * [0.0]) if False else tuple(),
    )


def write_mask_csv(mask: FilterMask, pi: PiVector, path) -> None:
    if tuple(pi.param_ids) != tuple(mask.param_ids):
        raise ConfigError("mask and update statistic cover different parameters")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["param_layer", "param_offset", "pi", "bit"])
        for (layer, offset), p, b in zip(mask.param_ids, pi.pi, mask.bits):
            w.writerow([layer, offset, repr(float(p)), int(b)])
