"""Power Jaccard loss and the labeled/unlabeled sample loss composition."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch

from siamcd.backbone import DualTaskOutputs
from siamcd.errors import ConfigurationError, ContractError, DomainError, ShapeError


class ConsistencyMode(str, enum.Enum):
    # agreement between the two change outputs; usable without labels
    prediction_pair = "prediction_pair"
    # both change outputs scored against y_c, exactly like the supervised change term
    labeled_style = "labeled_style"


@dataclass
class LossConfig:
    power_q: float = 2.0
    smoothing_eps: float = 1e-6
    phi: float = 1.0
    consistency_mode: ConsistencyMode = ConsistencyMode.prediction_pair

    def __post_init__(self):
        self.consistency_mode = ConsistencyMode(self.consistency_mode)
        if not 1.0 < self.power_q <= 2.0:
            raise ConfigurationError(f"power_q must lie in (1, 2], got {self.power_q}")
        if self.smoothing_eps < 0:
            raise ConfigurationError(f"smoothing_eps must be >= 0, got {self.smoothing_eps}")
        if not math.isfinite(self.phi) or self.phi < 0:
            raise ConfigurationError(f"phi must be finite and >= 0, got {self.phi}")

    def to_dict(self):
        d = asdict(self)
        d["consistency_mode"] = self.consistency_mode.value
        return d


@dataclass
class LabelSet:
    """Ground truth for one sample; tensors of shape (H, W) or (1, H, W) with values in {0, 1}."""

    y_s_t1: torch.Tensor
    y_s_t2: torch.Tensor
    y_c: torch.Tensor

    def __post_init__(self):
        shapes = {tuple(self.y_s_t1.shape), tuple(self.y_s_t2.shape), tuple(self.y_c.shape)}
        if len(shapes) != 1:
            raise ShapeError(f"label rasters differ in shape: {sorted(shapes)}")


class LossBreakdown(NamedTuple):
    semantics: float
    change: float
    consistency: float
    total: float


def _reduce_dims(t):
    return tuple(range(1, t.ndim))


def power_jaccard_per_sample(p, y, q=2.0, eps=1e-6):
    """Loss per leading-axis sample of (N, ...) tensors."""
    if p.shape != y.shape:
        raise ShapeError(f"prediction {tuple(p.shape)} and target {tuple(y.shape)} differ in shape")
    if p.ndim < 2 or p[0].numel() == 0:
        raise DomainError("power_jaccard needs a non-empty raster per sample")
    dims = _reduce_dims(p)
    y = y.to(p.dtype)
    inter = (p * y).sum(dims)
    denom = (p.pow(q)).sum(dims) + (y.pow(q)).sum(dims) - inter
    return 1.0 - (inter + eps) / (denom + eps)


def power_jaccard(p, y, config: LossConfig | None = None):
    """1 - (sum(p*y) + eps) / (sum(p^q) + sum(y^q) - sum(p*y) + eps), reduced over all pixels."""
    config = config or LossConfig()
    if p.shape != y.shape:
        raise ShapeError(f"prediction {tuple(p.shape)} and target {tuple(y.shape)} differ in shape")
    if p.numel() == 0:
        raise DomainError("power_jaccard of an empty raster is undefined")
    return power_jaccard_per_sample(
        p.reshape(1, -1), y.reshape(1, -1), config.power_q, config.smoothing_eps
    )[0]


def power_jaccard_grad(p, y, q=2.0, eps=1e-6):
    """Closed-form derivative of the loss with respect to ``p`` (numpy, float64).

    With I = sum(p*y) + eps and D = sum(p^q) + sum(y^q) - sum(p*y) + eps,
    dL/dp = -(y * D - I * (q p^(q-1) - y)) / D^2.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inter = (p * y).sum() + eps
    denom = (p**q).sum() + (y**q).sum() - (p * y).sum() + eps
    return -(y * denom - inter * (q * p ** (q - 1) - y)) / denom**2


def _require(outputs, *names, why):
    for name in names:
        if getattr(outputs, name) is None:
            raise ContractError(f"output {name} is absent; {why}")


def semantics_loss(outputs: DualTaskOutputs, labels: LabelSet, config: LossConfig | None = None):
    config = config or LossConfig()
    _require(outputs, "p_s_t1", "p_s_t2", why="semantics loss needs a dual-task variant")
    return power_jaccard(outputs.p_s_t1, labels.y_s_t1.reshape(outputs.p_s_t1.shape), config) + power_jaccard(
        outputs.p_s_t2, labels.y_s_t2.reshape(outputs.p_s_t2.shape), config
    )


def change_loss(outputs: DualTaskOutputs, labels: LabelSet, config: LossConfig | None = None):
    """Change term; the semantic-derived output is scored only when the variant has one."""
    config = config or LossConfig()
    _require(outputs, "p_c", why="every variant must emit a change output")
    y_c = labels.y_c.reshape(outputs.p_c.shape)
    loss = power_jaccard(outputs.p_c, y_c, config)
    if outputs.p_cs is not None:
        loss = loss + power_jaccard(outputs.p_cs, y_c, config)
    return loss


def consistency_loss(outputs: DualTaskOutputs, config: LossConfig | None = None, labels: LabelSet | None = None):
    config = config or LossConfig()
    _require(outputs, "p_c", "p_cs", why="consistency needs the semantic change head (SSL variant)")
    if config.consistency_mode is ConsistencyMode.labeled_style:
        if labels is None:
            raise ContractError("labeled_style consistency scores against y_c and cannot run without labels")
        y_c = labels.y_c.reshape(outputs.p_c.shape)
        return power_jaccard(outputs.p_c, y_c, config) + power_jaccard(outputs.p_cs, y_c, config)
    return power_jaccard(outputs.p_c, outputs.p_cs, config)


def sample_loss(outputs: DualTaskOutputs, labels: LabelSet | None, config: LossConfig | None = None):
    """Loss of one sample plus its (semantics, change, consistency, total) breakdown.

    Labeled samples contribute semantics + change; unlabeled ones phi * consistency.
    Variants without a semantic decoder skip the semantics term.
    """
    config = config or LossConfig()
    zero = outputs.p_c.new_zeros(())
    if labels is not None:
        l_s = semantics_loss(outputs, labels, config) if outputs.p_s_t1 is not None else zero
        l_c = change_loss(outputs, labels, config)
        total = l_s + l_c
        return total, LossBreakdown(float(l_s.detach()), float(l_c.detach()), 0.0, float(total.detach()))
    l_cons = consistency_loss(outputs, config)
    total = config.phi * l_cons
    # the consistency column logs the raw term; total carries the phi weighting
    return total, LossBreakdown(0.0, 0.0, float(l_cons.detach()), float(total.detach()))


def batch_loss(samples, config: LossConfig | None = None):
    """Mean sample loss over ``[(outputs, labels_or_None), ...]``; returns (loss, mean breakdown)."""
    config = config or LossConfig()
    if not samples:
        raise DomainError("batch_loss of an empty batch")
    totals, parts = zip(*(sample_loss(o, y, config) for o, y in samples))
    n = len(samples)
    mean = LossBreakdown(*(sum(col) / n for col in zip(*parts)))
    return torch.stack(list(totals)).mean(), mean


def batched_sample_losses(outputs: DualTaskOutputs, labels: dict | None, labeled: torch.Tensor, config: LossConfig):
    """Vectorized per-sample losses for a stacked batch.

    ``labels`` holds (N, H, W) tensors ``y_s_t1``, ``y_s_t2``, ``y_c`` (rows of unlabeled
    samples are ignored); ``labeled`` is a bool mask of shape (N,). Returns per-sample
    (semantics, change, consistency, total) tensors matching ``sample_loss`` row by row.
    """
    q, eps = config.power_q, config.smoothing_eps
    n = outputs.p_c.shape[0]
    zero = outputs.p_c.new_zeros(n)
    labeled = labeled.to(torch.bool)
    l_s = l_c = l_cons = zero
    if labeled.any():
        if labels is None:
            raise ContractError("labeled samples in batch but no labels given")
        l_c = power_jaccard_per_sample(outputs.p_c, labels["y_c"], q, eps)
        if outputs.p_cs is not None:
            l_c = l_c + power_jaccard_per_sample(outputs.p_cs, labels["y_c"], q, eps)
        if outputs.p_s_t1 is not None:
            l_s = power_jaccard_per_sample(outputs.p_s_t1, labels["y_s_t1"], q, eps) + power_jaccard_per_sample(
                outputs.p_s_t2, labels["y_s_t2"], q, eps
            )
        l_s = torch.where(labeled, l_s, zero)
        l_c = torch.where(labeled, l_c, zero)
    if (~labeled).any():
        _require(outputs, "p_c", "p_cs", why="unlabeled samples need the SSL variant")
        if config.consistency_mode is ConsistencyMode.labeled_style:
            raise ContractError("labeled_style consistency cannot score unlabeled samples")
        l_cons = torch.where(~labeled, power_jaccard_per_sample(outputs.p_c, outputs.p_cs, q, eps), zero)
    total = l_s + l_c + config.phi * l_cons
    return l_s, l_c, l_cons, total
