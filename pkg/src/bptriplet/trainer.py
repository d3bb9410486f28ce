"""Pretraining and the pseudo-label co-training loop.

Each step draws three groups of rows and pushes them through the feature
extractor in a single forward pass:

* the mixed batch from :func:`~bptriplet.mining.build_batch` (source half
  plus selected pseudo-labelled target half, or all source before any
  target sample qualifies), which feeds the source cross-entropy and the
  triplet term;
* ``batch_size / 2`` target rows drawn uniformly from the whole unlabeled
  target set.

The conditional-entropy term covers every target row in the step and the
domain discriminator sees every row. The trainer only ever receives target
features; accuracies come from an optional ``monitor`` callback owned by the
caller.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import losses as L
from . import mining as M
from . import model as nets
from . import tensor as T
from .data import LabeledDataset, UnlabeledDataset
from .model import ModelParams
from .optim import OptimizerState, grl_schedule, lr_schedule, sgd_momentum_step
from .tensor import ConfigError

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "step",
    "loss_total",
    "loss_cls",
    "loss_adv",
    "loss_bptri",
    "n_pseudo",
    "threshold_mean",
    "src_acc",
    "tgt_acc",
)

Monitor = Callable[[ModelParams], tuple[float, float]]


class DivergenceError(RuntimeError):
    """A loss, parameter or prediction became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    mining: M.MiningConfig = field(default_factory=M.MiningConfig)
    s0: int = 4000
    # None means one refresh period
    pretrain_steps: int | None = None
    batch_size: int = 64
    lr0: float = 0.003
    momentum: float = 0.9
    lr_alpha: float = 10.0
    lr_beta: float = 0.75
    grl_gamma: float = 10.0
    head_lr_mult: float = 1.0
    target_entropy: bool = True
    pretrain_entropy: bool = True
    src_acc_floor: float = 0.9
    eval_period: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.s0 < 0:
            raise ConfigError("s0 must be >= 0")
        if self.pretrain_steps is not None and self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if not (self.lr0 > 0 and self.lr_alpha >= 0 and self.lr_beta >= 0 and self.grl_gamma >= 0):
            raise ConfigError("learning-rate and schedule constants must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.head_lr_mult > 0:
            raise ConfigError("head_lr_mult must be positive")

    @property
    def n_pretrain(self) -> int:
        return self.mining.refresh_period if self.pretrain_steps is None else self.pretrain_steps

    @property
    def horizon(self) -> int:
        return self.n_pretrain + self.s0


@dataclass
class StepRecord:
    step: int
    loss_total: float
    loss_cls: float
    loss_adv: float
    loss_bptri: float
    n_pseudo: int
    threshold_mean: float
    src_acc: float = float("nan")
    tgt_acc: float = float("nan")
    refreshed: bool = False
    n_triplets: int = 0
    lr: float = 0.0
    grl_coeff: float = 0.0
    wall_time: float = 0.0


@dataclass
class TrainLog:
    records: list[StepRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("step numbers must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def refresh_steps(self) -> list[int]:
        return [r.step for r in self.records if r.refreshed]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(getattr(r, c)) for c in METRICS_COLUMNS])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    log: TrainLog
    target_predictions: np.ndarray | None = None
    selected: list[M.PseudoLabeled] = field(default_factory=list)


@dataclass
class _StepLosses:
    total: float
    cls: float
    adv: float
    bptri: float
    n_triplets: int


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    batch_seq, triplet_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(batch_seq), np.random.default_rng(triplet_seq)


def _lr_mult(cfg: TrainConfig) -> dict[str, float]:
    return {"y": cfg.head_lr_mult, "d": cfg.head_lr_mult}


def compute_step_loss(
    params: ModelParams,
    x: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    triplets: list[tuple[int, int, int]],
    loss_cfg: L.LossConfig,
    grl_coeff: float,
    entropy: bool,
) -> tuple[T.Tensor, T.Tensor, T.Tensor, T.Tensor]:
    """Total, classification, adversarial and triplet losses for one batch.

    The leading ``len(labels)`` rows of ``x`` carry ``labels`` (ground truth
    on source rows, pseudo-labels on target rows); ``domains`` marks every
    row. Triplet indices refer to rows of ``x``.
    """
    feats = nets.forward_features(params, x)
    logp = nets.class_logprobs(params, feats)
    src_rows = np.flatnonzero(domains == M.SOURCE)
    tgt_rows = np.flatnonzero(domains == M.TARGET)
    src_lp = T.take_rows(logp, src_rows)
    tgt_lp = T.take_rows(logp, tgt_rows) if entropy and len(tgt_rows) else None
    l_cls = L.classification_loss(src_lp, labels[src_rows], tgt_lp, raw_sum=loss_cfg.raw_sum)
    l_adv = L.adversarial_loss(nets.domain_logprobs(params, feats, grl_coeff), domains)
    if triplets and loss_cfg.lambda2 > 0:
        l_tri = L.bp_triplet_loss(L.TripletBatch(feats, triplets), loss_cfg)
    else:
        l_tri = T.Tensor(0.0)
    return L.total_loss(l_adv, l_tri, l_cls, loss_cfg), l_cls, l_adv, l_tri


def _apply_step(
    params: ModelParams,
    state: OptimizerState,
    cfg: TrainConfig,
    loss_cfg: L.LossConfig,
    x: np.ndarray,
    labels: np.ndarray,
    domains: np.ndarray,
    triplets,
    global_step: int,
    entropy: bool,
    step_label: int,
) -> tuple[ModelParams, OptimizerState, _StepLosses, float, float]:
    lr = lr_schedule(global_step, cfg.horizon, cfg.lr0, cfg.lr_alpha, cfg.lr_beta)
    coeff = grl_schedule(global_step, cfg.horizon, cfg.grl_gamma)
    params.zero_grad()
    with T.Tape() as tape:
        total, l_cls, l_adv, l_tri = compute_step_loss(
            params, x, labels, domains, triplets, loss_cfg, coeff, entropy
        )
    values = _StepLosses(total.item(), l_cls.item(), l_adv.item(), l_tri.item(), len(triplets))
    if not np.isfinite([values.total, values.cls, values.adv, values.bptri]).all():
        raise DivergenceError(
            f"non-finite loss at step {step_label}: total={values.total} cls={values.cls} "
            f"adv={values.adv} bptri={values.bptri} lr={lr:.3g}"
        )
    tape.backward(total)
    grads = {name: t.grad for name, t in params.items() if t.grad is not None}
    params, state = sgd_momentum_step(params, grads, state, lr, cfg.momentum, _lr_mult(cfg))
    bad = [name for name, t in params.items() if not np.isfinite(t.data).all()]
    if bad:
        raise DivergenceError(f"non-finite parameters after step {step_label}: {', '.join(bad)} (lr={lr:.3g})")
    return params, state, values, lr, coeff


def _target_draw(rng: np.random.Generator, n_target: int, k: int) -> np.ndarray:
    return rng.integers(0, n_target, size=k)


def pretrain(
    params: ModelParams,
    source: LabeledDataset,
    target: UnlabeledDataset,
    cfg: TrainConfig,
    state: OptimizerState | None = None,
    monitor: Monitor | None = None,
    rngs: tuple[np.random.Generator, np.random.Generator] | None = None,
) -> TrainResult:
    """Classification + adversarial training without the triplet term."""
    if len(source) == 0 or len(target) == 0:
        raise ValueError("pretraining needs non-empty source and target sets")
    state = state or OptimizerState.zeros_like(params)
    batch_rng, _ = rngs or _rngs(cfg.seed)
    log = TrainLog()
    half = cfg.batch_size // 2
    loss_cfg = replace(cfg.loss, lambda2=0.0)
    t0 = time.perf_counter()
    for step in range(1, cfg.n_pretrain + 1):
        mixed = M.build_batch(source.y, [], cfg.batch_size, batch_rng)
        tgt = _target_draw(batch_rng, len(target), half)
        x = np.concatenate([source.x[mixed.source_index], target.x[tgt]])
        labels = mixed.labels
        domains = np.concatenate([mixed.domains, np.full(half, M.TARGET)])
        params, state, v, lr, coeff = _apply_step(
            params, state, cfg, loss_cfg, x, labels, domains, [],
            step - 1, cfg.pretrain_entropy, step,
        )
        rec = StepRecord(step, v.total, v.cls, v.adv, 0.0, 0, float("nan"), lr=lr, grl_coeff=coeff,
                         wall_time=time.perf_counter() - t0)
        if step == cfg.n_pretrain and monitor is not None:
            rec.src_acc, rec.tgt_acc = monitor(params)
        log.append(rec)

    if cfg.n_pretrain > 0:
        src_acc = float(np.mean(nets.predict(params, source.x) == source.y))
        if src_acc < cfg.src_acc_floor:
            msg = f"pretraining reached source accuracy {src_acc:.3f} < floor {cfg.src_acc_floor}"
            logger.warning(msg)
            log.warnings.append(msg)
    return TrainResult(params, state, log)


def refresh_pseudo_labels(params: ModelParams, target: UnlabeledDataset, mining: M.MiningConfig):
    """Fresh selection over the whole target set; returns (selected, eligible, mean threshold)."""
    with np.errstate(all="ignore"):
        probs = nets.classify(params, nets.forward_features(params, target.x))
    if not np.isfinite(probs).all():
        raise DivergenceError("non-finite class probabilities at pseudo-label refresh")
    selected = M.assign_pseudo_labels(probs, mining)
    eligible = M.eligible_categories(selected, mining.n0)
    thresholds = M.dynamic_thresholds(probs, mining.warm_threshold)
    return selected, eligible, float(thresholds.mean())


def train(
    params: ModelParams,
    source: LabeledDataset,
    target: UnlabeledDataset,
    cfg: TrainConfig,
    state: OptimizerState | None = None,
    monitor: Monitor | None = None,
    rngs: tuple[np.random.Generator, np.random.Generator] | None = None,
    on_refresh: Callable[[int, ModelParams], None] | None = None,
) -> TrainResult:
    """Main loop: refresh pseudo-labels at step 1 and every ``refresh_period`` steps."""
    state = state or OptimizerState.zeros_like(params)
    batch_rng, triplet_rng = rngs or _rngs(cfg.seed)
    mining = cfg.mining
    half = cfg.batch_size // 2
    log = TrainLog()
    selected: list[M.PseudoLabeled] = []
    pool: list[M.PseudoLabeled] = []
    eligible: set[int] = set()
    thr_mean = float("nan")
    t0 = time.perf_counter()
    for s in range(1, cfg.s0 + 1):
        refreshed = s == 1 or s % mining.refresh_period == 0
        if refreshed:
            selected, eligible, thr_mean = refresh_pseudo_labels(params, target, mining)
            pool = [p for p in selected if p.pseudo_label in eligible]
            if on_refresh is not None:
                on_refresh(s, params)

        mixed = M.build_batch(source.y, pool, cfg.batch_size, batch_rng)
        tgt = _target_draw(batch_rng, len(target), half)
        x = np.concatenate([mixed.features(source.x, target.x), target.x[tgt]])
        domains = np.concatenate([mixed.domains, np.full(half, M.TARGET)])
        triplets = []
        if cfg.loss.lambda2 > 0:
            triplets = M.sample_triplets(mixed.labels, eligible, mining, triplet_rng, mixed.domains)
        params, state, v, lr, coeff = _apply_step(
            params, state, cfg, cfg.loss, x, mixed.labels, domains, triplets,
            cfg.n_pretrain + s - 1, cfg.target_entropy, s,
        )
        rec = StepRecord(
            s, v.total, v.cls, v.adv, v.bptri, len(selected), thr_mean,
            refreshed=refreshed, n_triplets=v.n_triplets, lr=lr, grl_coeff=coeff,
            wall_time=time.perf_counter() - t0,
        )
        if monitor is not None and (
            refreshed or s == cfg.s0 or (cfg.eval_period and s % cfg.eval_period == 0)
        ):
            rec.src_acc, rec.tgt_acc = monitor(params)
        log.append(rec)

    preds = nets.predict(params, target.x)
    return TrainResult(params, state, log, preds, selected)


def fit(
    params: ModelParams,
    source: LabeledDataset,
    target: UnlabeledDataset,
    cfg: TrainConfig,
    monitor: Monitor | None = None,
    on_refresh: Callable[[int, ModelParams], None] | None = None,
) -> tuple[TrainResult, TrainResult]:
    """Pretrain then train with shared optimizer state and random streams."""
    rngs = _rngs(cfg.seed)
    pre = pretrain(params, source, target, cfg, monitor=monitor, rngs=rngs)
    main = train(pre.params, source, target, cfg, state=pre.state, monitor=monitor, rngs=rngs,
                 on_refresh=on_refresh)
    main.log.warnings[:0] = pre.log.warnings
    return pre, main
