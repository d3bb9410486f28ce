"""Loss terms of the BP-triplet objective.

All tensor-valued losses are built from :mod:`bptriplet.tensor` primitives so
they differentiate on the active tape. Logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    gamma: float = 1.0
    margin: float = 0.3
    lambda1: float = 1.0
    lambda2: float = 1.0
    # hold the modulating weight constant during backward (ablation only)
    stop_weight_grad: bool = False
    # sum the classification terms instead of averaging each over its set
    raw_sum: bool = False

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not self.margin >= 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ConfigError("lambda1 and lambda2 must be >= 0")


@dataclass
class TripletBatch:
    features: Tensor
    triplets: list[tuple[int, int, int]] = field(default_factory=list)
    labels: Sequence[int] | None = None

    def validate(self) -> None:
        n = self.features.shape[0]
        for a, p, q in self.triplets:
            if not (0 <= a < n and 0 <= p < n and 0 <= q < n):
                raise IndexError(f"triplet {(a, p, q)} out of range for batch of {n}")
            if a == p or a == q or p == q:
                raise ValueError(f"triplet {(a, p, q)} repeats an index")
            if self.labels is not None:
                la, lp, ln = self.labels[a], self.labels[p], self.labels[q]
                if not (la == lp and la != ln):
                    raise ValueError(f"triplet {(a, p, q)} violates label constraints")


# ---------------------------------------------------------------------------
# pairwise likelihood
# ---------------------------------------------------------------------------


def pair_likelihood(s_ij: int, s_ik: int, d_ij: float, d_ik: float, alpha: float, margin: float) -> float:
    """Closed-form likelihood ``exp(alpha*((-1)^s_ij d_ij + (-1)^s_ik d_ik - (s_ij xor s_ik) m))``."""
    beta = int(s_ij) ^ int(s_ik)
    sign_ij = -1.0 if s_ij else 1.0
    sign_ik = -1.0 if s_ik else 1.0
    return math.exp(alpha * (sign_ij * d_ij + sign_ik * d_ik - beta * margin))


def pair_likelihood_cases(s_ij: int, s_ik: int, d_ij: float, d_ik: float, alpha: float, margin: float) -> float:
    """The same likelihood written out case by case over the similarity pair."""
    if s_ij == 1 and s_ik == 0:
        return math.exp(-alpha * (d_ij - d_ik + margin))
    if s_ij == 0 and s_ik == 1:
        return math.exp(-alpha * (-d_ij + d_ik + margin))
    if s_ij == 1 and s_ik == 1:
        return math.exp(-alpha * (d_ij + d_ik))
    if s_ij == 0 and s_ik == 0:
        return math.exp(-alpha * (-d_ij - d_ik))
    raise ValueError(f"similarities must be 0 or 1, got {(s_ij, s_ik)}")


def modulating_weight(v, alpha: float, gamma: float):
    """``(1 - exp(-alpha * max(v, 0))) ** gamma`` for floats or arrays."""
    vp = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    base = -np.expm1(-alpha * vp)
    return np.ones_like(base) if gamma == 0 else base**gamma


# ---------------------------------------------------------------------------
# triplet loss
# ---------------------------------------------------------------------------


def triplet_violations(batch: TripletBatch, margin: float) -> Tensor:
    """Per-triplet ``d(a, p) - d(a, n) + m`` on the tape."""
    idx = np.asarray(batch.triplets, dtype=np.intp).reshape(-1, 3)
    f = batch.features
    anchor = T.take_rows(f, idx[:, 0])
    d_ap = T.sq_dist(anchor, T.take_rows(f, idx[:, 1]))
    d_an = T.sq_dist(anchor, T.take_rows(f, idx[:, 2]))
    return d_ap - d_an + margin


def bp_triplet_terms(batch: TripletBatch, cfg: LossConfig) -> Tensor:
    """Per-triplet loss ``alpha * w(v) * max(v, 0)``."""
    vp = T.relu(triplet_violations(batch, cfg.margin))
    if cfg.gamma == 0:
        return cfg.alpha * vp
    # 1 - exp(-alpha v+) is in [0, 1), so fractional powers are well defined
    base = 1.0 - T.exp(-cfg.alpha * vp)
    weight = T.power(base, cfg.gamma)
    if cfg.stop_weight_grad:
        weight = T.stop_gradient(weight)
    return cfg.alpha * (weight * vp)


def bp_triplet_loss(batch: TripletBatch, cfg: LossConfig) -> Tensor:
    if not batch.triplets:
        return Tensor(0.0)
    return T.sum(bp_triplet_terms(batch, cfg))


def hinge_triplet_terms(batch: TripletBatch, margin: float) -> Tensor:
    return T.relu(triplet_violations(batch, margin))


# ---------------------------------------------------------------------------
# classification and adversarial losses
# ---------------------------------------------------------------------------


def _check_labels(labels: np.ndarray, n_rows: int, n_cols: int, what: str) -> None:
    if labels.shape != (n_rows,):
        raise ShapeError(f"{what}: expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cols):
        raise ValueError(f"{what}: label out of range [0, {n_cols})")


def source_cross_entropy(logprobs: Tensor, labels, raw_sum: bool = False) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    _check_labels(labels, logprobs.shape[0], logprobs.shape[1], "source labels")
    if logprobs.shape[0] == 0:
        return Tensor(0.0)
    nll = -T.sum(T.pick(logprobs, labels))
    return nll if raw_sum else nll / logprobs.shape[0]


def target_entropy(logprobs: Tensor, raw_sum: bool = False) -> Tensor:
    if logprobs.shape[0] == 0:
        return Tensor(0.0)
    ent = -T.sum(T.plogp(logprobs))
    return ent if raw_sum else ent / logprobs.shape[0]


def classification_loss(
    source_logprobs: Tensor,
    source_labels,
    target_logprobs: Tensor | None = None,
    raw_sum: bool = False,
) -> Tensor:
    """Source cross-entropy plus target conditional entropy.

    Each term is averaged over its own set unless ``raw_sum``; an empty or
    missing set contributes zero.
    """
    loss = source_cross_entropy(source_logprobs, source_labels, raw_sum)
    if target_logprobs is not None and target_logprobs.shape[0] > 0:
        if target_logprobs.shape[1] != source_logprobs.shape[1]:
            raise ShapeError("source and target category counts differ")
        loss = loss + target_entropy(target_logprobs, raw_sum)
    return loss


def adversarial_loss(domain_logprobs: Tensor, domain_labels) -> Tensor:
    """Mean domain cross-entropy; 0 = source, 1 = target.

    The minimax sign is carried by the gradient reversal in front of the
    discriminator, so this value is minimized for every parameter group.
    """
    labels = np.asarray(domain_labels, dtype=np.intp)
    if domain_logprobs.ndim != 2 or domain_logprobs.shape[0] == 0:
        raise ShapeError("adversarial loss needs a non-empty batch")
    if domain_logprobs.shape[1] != 2:
        raise ShapeError("domain log-probabilities must have 2 columns")
    _check_labels(labels, domain_logprobs.shape[0], 2, "domain labels")
    return -T.mean(T.pick(domain_logprobs, labels))


def total_loss(l_adv, l_bptri, l_cls, cfg: LossConfig) -> Tensor:
    return cfg.lambda1 * T._as_tensor(l_adv) + cfg.lambda2 * T._as_tensor(l_bptri) + l_cls
