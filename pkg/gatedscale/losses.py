"""Pixel-wise cross-entropy and the stage-weighted total loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gatedscale import ops
from gatedscale.errors import ConfigError, LabelError, NumericError, ShapeError
from gatedscale.gsto import ProbabilityMap
from gatedscale.tensor import Tensor, record

IGNORE_INDEX = 255


@dataclass(frozen=True)
class LossSpec:
    """Per-stage loss weights, last entry for the main head.

    ``enabled[i]`` is False for a stage that produces no loss; its weight is
    then skipped rather than multiplied by a missing value. ``head_weight`` is
    set when a supervised PPM or ASPP head emits a class-score map of its own.
    """

    stage_weights: tuple[float, ...] = (0.2, 0.3, 0.5, 1.0)
    ignore_index: int = IGNORE_INDEX
    enabled: tuple[bool, ...] | None = None
    head_weight: float | None = None

    def __post_init__(self):
        if self.head_weight is not None and self.head_weight < 0:
            raise ConfigError(f"head weight must be non-negative, got {self.head_weight}")
        if not self.stage_weights:
            raise ConfigError("stage_weights is empty")
        if any(w < 0 for w in self.stage_weights):
            raise ConfigError(f"stage weights must be non-negative, got {self.stage_weights}")
        if self.stage_weights[-1] != 1.0:
            raise ConfigError(f"the final-stage weight is 1.0, got {self.stage_weights[-1]}")
        if self.enabled is not None and len(self.enabled) != len(self.stage_weights) - 1:
            raise ConfigError(
                f"enabled needs {len(self.stage_weights) - 1} entries, got {len(self.enabled)}"
            )

    def stage_enabled(self, i: int) -> bool:
        return True if self.enabled is None else self.enabled[i]

    @classmethod
    def for_config(cls, config, ignore_index: int = IGNORE_INDEX) -> LossSpec:
        """Weights from a NetConfig, with stages that produce no aux map switched off."""
        enabled = tuple(config.stage_has_aux(s) for s in range(1, config.stages))
        head = config.head_loss_weight if config.head_supervised() else None
        return cls(tuple(config.loss_weights), ignore_index, enabled, head)


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Softmax cross-entropy averaged over non-ignored pixels."""
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise LabelError(f"label {int(labels[bad][0])} outside [0, {c}) and not ignore_index {ignore_index}")
    count = int(valid.sum())
    if count == 0:
        raise NumericError("every pixel is ignore_index; the mean loss is undefined")

    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    target = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, target[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    out = np.full((1, 1, 1, 1), loss, dtype=logits.dtype)

    def rule(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1, axis=1)
        grad *= valid[:, None] / count
        return (grad * g.reshape(()),)

    return record("pixel_cross_entropy", (logits,), out, rule)


def total_loss(main: Tensor, aux: Sequence[Tensor | None], spec: LossSpec, head: Tensor | None = None) -> Tensor:
    """w_1*l_1 + ... + w_{S-1}*l_{S-1} [+ w_head*l_head] + w_S*main, summed left to right.

    ``aux`` holds one entry per auxiliary stage; None marks a disabled stage.
    """
    if (head is None) != (spec.head_weight is None):
        raise ConfigError("a head loss needs a head weight and the other way round")
    if len(aux) != len(spec.stage_weights) - 1:
        raise ConfigError(f"{len(spec.stage_weights)} stage weights but {len(aux)} aux losses plus main")
    total = None
    for i, (weight, loss) in enumerate(zip(spec.stage_weights, aux)):
        if loss is None:
            if spec.stage_enabled(i):
                raise ConfigError(f"stage {i + 1} is enabled but has no loss")
            continue
        term = ops.scale(loss, weight)
        total = term if total is None else ops.add(total, term)
    if head is not None:
        term = ops.scale(head, spec.head_weight)
        total = term if total is None else ops.add(total, term)
    term = ops.scale(main, spec.stage_weights[-1])
    return term if total is None else ops.add(total, term)


@dataclass
class LossBreakdown:
    total: Tensor
    main: Tensor
    stages: list[Tensor | None]
    head: Tensor | None = None


def network_loss(logits: Tensor, aux: Sequence[ProbabilityMap], labels: np.ndarray, spec: LossSpec) -> LossBreakdown:
    """Cross-entropy of the main logits and of every aux map upsampled to label resolution.

    Maps tagged 1..S-1 feed the stage losses; a map tagged S is the head's own.
    """
    hw = labels.shape[1:]
    stages: list[Tensor | None] = [None] * (len(spec.stage_weights) - 1)
    head = None
    for P in aux:
        if not 1 <= P.stage <= len(stages) + 1:
            raise ConfigError(f"aux map tagged with stage {P.stage}, expected 1..{len(stages) + 1}")
        up = P.logits if P.logits.shape[2:] == hw else ops.bilinear_upsample(P.logits, hw)
        loss = pixel_cross_entropy(up, labels, spec.ignore_index)
        if P.stage > len(stages):
            head = loss
        else:
            stages[P.stage - 1] = loss
    main = pixel_cross_entropy(logits, labels, spec.ignore_index)
    return LossBreakdown(total_loss(main, stages, spec, head), main, stages, head)
