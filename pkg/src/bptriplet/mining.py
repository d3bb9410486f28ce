"""Pseudo-label selection and cross-domain triplet construction.

Every randomized function takes an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError

SOURCE, TARGET = 0, 1


@dataclass(frozen=True)
class MiningConfig:
    n0: int = 3
    warm_threshold: float = 0.9
    refresh_period: int = 2000
    triplets_per_anchor: int = 1

    def __post_init__(self):
        if self.n0 < 1:
            raise ConfigError(f"n0 must be positive, got {self.n0}")
        if not 0.0 < self.warm_threshold < 1.0:
            raise ConfigError(f"warm_threshold must lie in (0, 1), got {self.warm_threshold}")
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be positive")
        if self.triplets_per_anchor < 1:
            raise ConfigError("triplets_per_anchor must be positive")


@dataclass(frozen=True)
class PseudoLabeled:
    sample_index: int
    pseudo_label: int
    confidence: float
    threshold: float


def _validate_rows(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError(f"expected rows of at least 2 probabilities, got shape {probs.shape}")
    if np.any(~np.isfinite(probs)) or np.any(probs < 0):
        raise ValueError("probabilities must be finite and non-negative")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("probability rows must sum to 1 within 1e-9")
    return probs


def _neg_plogp(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def dynamic_thresholds(probs, warm_threshold: float = 0.9, base: float = math.e) -> np.ndarray:
    """Row-wise ``max(warm, 1 - H(p_top) / H(p))`` with entropies in ``base``.

    ``H(p_top)`` is the entropy contribution of the argmax category. A row
    with zero total entropy (exact one-hot) gets ratio 0, i.e. threshold 1.
    """
    probs = _validate_rows(probs)
    terms = _neg_plogp(probs) / math.log(base)
    top = np.argmax(probs, axis=1)
    h_top = terms[np.arange(len(probs)), top]
    h_all = terms.sum(axis=1)
    degenerate = ~(h_all > 0)
    ratio = np.where(degenerate, 0.0, h_top / np.where(degenerate, 1.0, h_all))
    return np.maximum(warm_threshold, 1.0 - ratio)


def dynamic_threshold(probs, warm_threshold: float = 0.9, base: float = math.e) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("dynamic_threshold takes a single probability vector")
    return float(dynamic_thresholds(probs[None, :], warm_threshold, base)[0])


def assign_pseudo_labels(probs, cfg: MiningConfig = MiningConfig()) -> list[PseudoLabeled]:
    """Argmax pseudo-labels for target rows whose confidence reaches their threshold.

    The returned list fully replaces any earlier selection.
    """
    probs = _validate_rows(probs)
    thresholds = dynamic_thresholds(probs, cfg.warm_threshold)
    labels = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(probs)), labels]
    keep = np.flatnonzero(conf >= thresholds)
    return [PseudoLabeled(int(i), int(labels[i]), float(conf[i]), float(thresholds[i])) for i in keep]


def eligible_categories(selected: list[PseudoLabeled], n0: int) -> set[int]:
    counts: dict[int, int] = {}
    for s in selected:
        counts[s.pseudo_label] = counts.get(s.pseudo_label, 0) + 1
    return {c for c, k in counts.items() if k >= n0}


@dataclass
class MixedBatch:
    """Indices and labels of a half-source / half-pseudo-labeled-target batch.

    ``labels`` holds ground truth for source members and pseudo-labels for
    target members; ``domains`` is 0 for source and 1 for target.
    """

    source_index: np.ndarray
    target_index: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    @property
    def n_source(self) -> int:
        return len(self.source_index)

    @property
    def n_target(self) -> int:
        return len(self.target_index)

    def __len__(self) -> int:
        return len(self.labels)

    def features(self, source_x: np.ndarray, target_x: np.ndarray) -> np.ndarray:
        return np.concatenate([source_x[self.source_index], target_x[self.target_index]], axis=0)


def _draw(rng: np.random.Generator, pool: int, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    if pool >= k:
        return rng.choice(pool, size=k, replace=False)
    return rng.integers(0, pool, size=k)


def build_batch(source_labels, target_selected: list[PseudoLabeled], batch_size: int, rng) -> MixedBatch:
    """Half source, half selected target; source only if nothing is selected.

    Members are drawn uniformly, with replacement only when a pool is smaller
    than its half.
    """
    source_labels = np.asarray(source_labels)
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    if len(source_labels) == 0:
        raise ValueError("source pool is empty")
    n_tgt = batch_size // 2 if target_selected else 0
    src = _draw(rng, len(source_labels), batch_size - n_tgt)
    pick = _draw(rng, len(target_selected), n_tgt)
    tgt = np.array([target_selected[i].sample_index for i in pick], dtype=np.intp)
    pseudo = np.array([target_selected[i].pseudo_label for i in pick], dtype=np.int64)
    labels = np.concatenate([source_labels[src].astype(np.int64), pseudo])
    domains = np.concatenate([np.full(len(src), SOURCE), np.full(len(tgt), TARGET)])
    return MixedBatch(np.asarray(src, dtype=np.intp), tgt, labels, domains)


def sample_triplets(labels, eligible: set[int] | None, cfg: MiningConfig, rng, domains=None) -> list[tuple[int, int, int]]:
    """Uniform (anchor, positive, negative) draws inside a labelled batch.

    Source members always take part; target members only when their
    pseudo-category is in ``eligible`` (``None`` admits every category).
    Every participant with at least one same-category partner and one
    other-category participant anchors ``cfg.triplets_per_anchor`` triplets.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if domains is None:
        domains = np.full(len(labels), SOURCE)
    domains = np.asarray(domains)
    if eligible is None:
        active = np.ones(len(labels), dtype=bool)
    else:
        in_set = np.isin(labels, np.fromiter(eligible, dtype=np.int64, count=len(eligible)))
        active = (domains == SOURCE) | in_set
    members = np.flatnonzero(active)
    k = cfg.triplets_per_anchor
    out: list[tuple[int, int, int]] = []
    for c in np.unique(labels[members]):
        same = members[labels[members] == c]
        other = members[labels[members] != c]
        if len(same) < 2 or len(other) == 0:
            continue
        n = len(same)
        # offset draws over n-1 slots skip the anchor's own position
        r = rng.integers(0, n - 1, size=(n, k))
        r = r + (r >= np.arange(n)[:, None])
        neg = rng.integers(0, len(other), size=(n, k))
        anchors = np.repeat(same, k)
        out.extend(zip(anchors.tolist(), same[r].ravel().tolist(), other[neg].ravel().tolist()))
    out.sort(key=lambda t: t[0])
    return out
