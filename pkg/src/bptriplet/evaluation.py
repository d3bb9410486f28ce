"""Accuracy, the A-distance domain-discrepancy probe, and feature export."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import losses as L
from . import model as nets
from . import tensor as T
from .model import MlpSpec, ModelParams
from .optim import OptimizerState, sgd_momentum_step


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(predictions == labels))


@dataclass(frozen=True)
class ProbeConfig:
    """Fixed domain probe: one hidden ReLU layer, SGD with momentum, 50/50 split."""

    hidden: int = 32
    steps: int = 500
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    standardize: bool = True

    def describe(self) -> str:
        return (f"mlp(d,{self.hidden},2) relu, {self.steps} sgd steps, batch {self.batch_size}, "
                f"lr {self.lr}, momentum {self.momentum}, standardize={self.standardize}, 50/50 split")


def a_distance_from_error(error: float) -> float:
    return 2.0 * (1.0 - 2.0 * error)


def domain_probe_error(source_features, target_features, cfg: ProbeConfig = ProbeConfig(), seed: int = 0) -> float:
    """Held-out error of a freshly trained source-vs-target classifier."""
    xs = np.asarray(source_features, dtype=np.float64)
    xt = np.asarray(target_features, dtype=np.float64)
    if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
        raise T.ShapeError(f"feature widths differ: {xs.shape} vs {xt.shape}")
    if len(xs) < 2 or len(xt) < 2:
        raise ValueError("each feature set needs at least two rows")
    rng = np.random.default_rng(seed)
    split_rng, init_rng, batch_rng = rng.spawn(3)

    def halves(x):
        order = split_rng.permutation(len(x))
        cut = len(x) // 2
        return x[order[:cut]], x[order[cut:]]

    s_train, s_test = halves(xs)
    t_train, t_test = halves(xt)
    x_train = np.concatenate([s_train, t_train])
    y_train = np.concatenate([np.zeros(len(s_train), np.int64), np.ones(len(t_train), np.int64)])
    x_test = np.concatenate([s_test, t_test])
    y_test = np.concatenate([np.zeros(len(s_test), np.int64), np.ones(len(t_test), np.int64)])
    if cfg.standardize:
        mu = x_train.mean(axis=0)
        sd = x_train.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        x_train = (x_train - mu) / sd
        x_test = (x_test - mu) / sd

    spec = MlpSpec((xs.shape[1], cfg.hidden, 2))
    probe = ModelParams({"p": spec}, nets.init_mlp(spec, "p", init_rng))
    state = OptimizerState.zeros_like(probe)
    for _ in range(cfg.steps):
        idx = batch_rng.integers(0, len(x_train), size=cfg.batch_size)
        probe.zero_grad()
        with T.Tape() as tape:
            logp = T.log_softmax(nets.mlp_forward(probe, "p", x_train[idx]))
            loss = L.adversarial_loss(logp, y_train[idx])
        tape.backward(loss)
        grads = {k: t.grad for k, t in probe.items() if t.grad is not None}
        probe, state = sgd_momentum_step(probe, grads, state, cfg.lr, cfg.momentum)
    pred = np.argmax(nets.mlp_forward(probe, "p", x_test).data, axis=1)
    return float(np.mean(pred != y_test))


def a_distance(source_features, target_features, cfg: ProbeConfig = ProbeConfig(), seed: int = 0) -> float:
    """``2 (1 - 2 eps)`` from the probe's held-out domain error ``eps``."""
    return a_distance_from_error(domain_probe_error(source_features, target_features, cfg, seed))


@dataclass
class EvalReport:
    source_accuracy: float
    target_accuracy: float
    a_distance: float
    n_source: int
    n_target: int
    probe: str = ProbeConfig().describe()

    def __post_init__(self):
        if not (0.0 <= self.source_accuracy <= 1.0 and 0.0 <= self.target_accuracy <= 1.0):
            raise ValueError("accuracies must lie in [0, 1]")
        if not -2.0 <= self.a_distance <= 2.0:
            raise ValueError("A-distance must lie in [-2, 2]")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown report keys {sorted(unknown)}")
        conv = {"float": float, "int": int, "str": str}
        return cls(**{k: conv[types[k]](v) for k, v in kv.items()})


def evaluate(params: ModelParams, task, probe: ProbeConfig = ProbeConfig(), seed: int = 0) -> EvalReport:
    """Source/target accuracy plus A-distance between extracted features."""
    fs = nets.extract_features(params, task.source.x)
    ft = nets.extract_features(params, task.target.x)
    src_acc = accuracy(nets.predict(params, task.source.x), task.source.y)
    tgt_acc = accuracy(nets.predict(params, task.target.x), task.target_labels.y)
    d_a = a_distance(fs, ft, probe, seed)
    return EvalReport(src_acc, tgt_acc, d_a, len(fs), len(ft), probe.describe())


def make_monitor(task):
    """Monitor callback for the trainer; closes over the hidden target labels."""

    def monitor(params: ModelParams) -> tuple[float, float]:
        return (
            accuracy(nets.predict(params, task.source.x), task.source.y),
            accuracy(nets.predict(params, task.target.x), task.target_labels.y),
        )

    return monitor


def write_feature_csv(path: str | Path, features: np.ndarray, labels, domain: str) -> None:
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"feature_{i}" for i in range(features.shape[1])] + ["label", "domain"])
        for row, lab in zip(features, labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab), domain])


def read_feature_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 2
    feats = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
    labels = np.array([int(r[d]) for r in body], dtype=np.int64)
    return feats, labels, [r[d + 1] for r in body]


def export_features(params: ModelParams, task, out_dir: str | Path) -> dict[str, Path]:
    """One CSV per domain with the extracted features, labels and domain name."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"source": out_dir / "features_source.csv", "target": out_dir / "features_target.csv"}
    write_feature_csv(paths["source"], nets.extract_features(params, task.source.x), task.source.y, "source")
    write_feature_csv(paths["target"], nets.extract_features(params, task.target.x),
                      task.target_labels.y, "target")
    return paths
