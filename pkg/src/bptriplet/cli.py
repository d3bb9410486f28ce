"""Command-line front end.

Subcommands: ``generate``, ``train``, ``eval``, ``gradcheck`` and ``compare``.
Every run is described by a flat ``key=value`` config (see :class:`RunConfig`);
``--config FILE`` loads one and ``--<key> VALUE`` flags override it. The
resolved config is written next to the outputs as ``config.txt`` and can be
fed back in to reproduce the run bit for bit.

Exit codes: 0 success, 1 failed gradient check, 2 config error, 3 numeric
divergence, 4 I/O or file-format error. ``BPTRIPLET_OUT_ROOT`` overrides the
output root.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import data
from . import evaluation as E
from . import losses as L
from . import mining as M
from . import model as nets
from . import trainer as tr
from .gradcheck import COMPONENTS, GRADCHECK_TOLERANCE, gradcheck_report
from .tensor import ConfigError

OUT_ROOT_ENV = "BPTRIPLET_OUT_ROOT"

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run. The fully defaulted config is the reference synthetic task."""

    out_dir: str = "runs/default"
    # empty manifest: generate the synthetic task below
    manifest: str = ""
    num_categories: int = 3
    per_category: int = 200
    dim: int = 2
    radius: float = 2.0
    std: float = 0.5
    rotation_deg: float = 30.0
    translation_x: float = 1.0
    translation_y: float = 0.0
    data_seed: int = -1
    # comma-separated widths; the classifier and discriminator input width is the last feature width
    feature_widths: str = "64,32"
    classifier_hidden: str = ""
    discriminator_hidden: str = "32"
    alpha: float = 1.0
    gamma: float = 1.0
    margin: float = 0.3
    lambda1: float = 1.0
    lambda2: float = 1.0
    stop_weight_grad: bool = False
    raw_sum: bool = False
    n0: int = 3
    warm_threshold: float = 0.9
    refresh_period: int = 2000
    triplets_per_anchor: int = 1
    s0: int = 4000
    pretrain_steps: int = -1
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
    num_seeds: int = 5
    gradcheck_seeds: int = 20
    probe_seed: int = 0

    def __post_init__(self):
        if self.num_seeds < 1 or self.gradcheck_seeds < 1:
            raise ConfigError("num_seeds and gradcheck_seeds must be >= 1")
        for key in ("feature_widths", "classifier_hidden", "discriminator_hidden"):
            _widths(getattr(self, key), key)
        if not _widths(self.feature_widths, "feature_widths"):
            raise ConfigError("feature_widths: need at least one layer")

    # -- derived objects -------------------------------------------------

    def shift_spec(self, seed: int | None = None) -> data.ShiftSpec:
        if seed is None:
            seed = self.data_seed if self.data_seed >= 0 else self.seed
        return data.ShiftSpec(
            num_categories=self.num_categories,
            per_category=self.per_category,
            dim=self.dim,
            radius=self.radius,
            std=self.std,
            rotation_deg=self.rotation_deg,
            translation=(self.translation_x, self.translation_y),
            seed=seed,
        )

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            loss=L.LossConfig(
                alpha=self.alpha,
                gamma=self.gamma,
                margin=self.margin,
                lambda1=self.lambda1,
                lambda2=self.lambda2,
                stop_weight_grad=self.stop_weight_grad,
                raw_sum=self.raw_sum,
            ),
            mining=M.MiningConfig(
                n0=self.n0,
                warm_threshold=self.warm_threshold,
                refresh_period=self.refresh_period,
                triplets_per_anchor=self.triplets_per_anchor,
            ),
            s0=self.s0,
            pretrain_steps=None if self.pretrain_steps < 0 else self.pretrain_steps,
            batch_size=self.batch_size,
            lr0=self.lr0,
            momentum=self.momentum,
            lr_alpha=self.lr_alpha,
            lr_beta=self.lr_beta,
            grl_gamma=self.grl_gamma,
            head_lr_mult=self.head_lr_mult,
            target_entropy=self.target_entropy,
            pretrain_entropy=self.pretrain_entropy,
            src_acc_floor=self.src_acc_floor,
            eval_period=self.eval_period,
            seed=self.seed,
        )

    def model_specs(self, input_dim: int, num_categories: int) -> tuple[nets.MlpSpec, ...]:
        feat = _widths(self.feature_widths, "feature_widths")
        return (
            nets.MlpSpec((input_dim, *feat)),
            nets.MlpSpec((feat[-1], *_widths(self.classifier_hidden, "classifier_hidden"), num_categories)),
            nets.MlpSpec((feat[-1], *_widths(self.discriminator_hidden, "discriminator_hidden"), 2)),
        )

    # -- text form -------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{k}={_format_value(v)}\n" for k, v in asdict(self).items())


def _widths(text: str, key: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    try:
        out = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None
    if any(w < 1 for w in out):
        raise ConfigError(f"{key}: widths must be positive")
    return out


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = typing.get_type_hints(RunConfig)
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(key: str, text: str):
    """Typed parse of one config value; errors name the offending field."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """File values first, then flag overrides; the env var finally re-roots ``out_dir``."""
    merged = {**(file_values or {}), **(overrides or {})}
    try:
        cfg = RunConfig(**merged)
        # surface validation errors from the nested configs now, not mid-run
        cfg.train_config()
        cfg.shift_spec()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        cfg = replace(cfg, out_dir=str(Path(root) / Path(cfg.out_dir).name))
    return cfg


def load_config(path: str | Path) -> dict[str, object]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def load_or_generate(cfg: RunConfig, seed: int | None = None) -> data.AdaptationTask:
    if cfg.manifest:
        return data.load_task(cfg.manifest)
    return data.generate_shifted_mixture(cfg.shift_spec(seed))


def cmd_generate(cfg: RunConfig) -> Path:
    """Write the synthetic task as IDX files plus a manifest; returns the manifest path."""
    out = Path(cfg.out_dir)
    manifest = data.save_task(data.generate_shifted_mixture(cfg.shift_spec()), out)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return manifest


def _write_predictions(path: Path, preds: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "prediction"])
        for i, p in enumerate(preds):
            w.writerow([i, int(p)])


@dataclass
class TrainOutcome:
    report: E.EvalReport
    pretrain: tr.TrainResult
    main: tr.TrainResult
    out_dir: Path


def cmd_train(cfg: RunConfig, task: data.AdaptationTask | None = None) -> TrainOutcome:
    """Pretrain, train, and write the run directory.

    Layout: ``config.txt``, ``pretrain_metrics.csv``, ``metrics.csv``,
    ``predictions.csv``, ``report.txt`` and ``checkpoints/`` holding
    ``pretrained.ckpt``, one ``step_<s>.ckpt`` per pseudo-label refresh
    (parameters just before that step's update) and ``final.ckpt``.
    """
    out = Path(cfg.out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    task = task or load_or_generate(cfg)
    specs = cfg.model_specs(task.source.dim, task.num_categories)
    params = nets.init_params(*specs, seed=cfg.seed)
    train_cfg = cfg.train_config()

    def on_refresh(step: int, p: nets.ModelParams) -> None:
        nets.save_checkpoint(p, ckpt_dir / f"step_{step:06d}.ckpt")

    pre, main = tr.fit(params, task.source, task.target, train_cfg,
                       monitor=E.make_monitor(task), on_refresh=on_refresh)
    nets.save_checkpoint(pre.params, ckpt_dir / "pretrained.ckpt")
    nets.save_checkpoint(main.params, ckpt_dir / "final.ckpt")
    (out / "pretrain_metrics.csv").write_text(pre.log.to_csv(), encoding="utf-8")
    (out / "metrics.csv").write_text(main.log.to_csv(), encoding="utf-8")
    _write_predictions(out / "predictions.csv", main.target_predictions)
    report = E.evaluate(main.params, task, seed=cfg.probe_seed)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    return TrainOutcome(report, pre, main, out)


def cmd_eval(cfg: RunConfig, checkpoint: str | Path) -> E.EvalReport:
    task = load_or_generate(cfg)
    specs = cfg.model_specs(task.source.dim, task.num_categories)
    params = nets.load_checkpoint(checkpoint, *specs)
    return E.evaluate(params, task, seed=cfg.probe_seed)


def cmd_gradcheck(cfg: RunConfig) -> dict[str, float]:
    return gradcheck_report(range(cfg.seed, cfg.seed + cfg.gradcheck_seeds))


# variant name -> overrides applied on top of the run config
VARIANTS: dict[str, dict[str, object]] = {
    "source_only": {"lambda1": 0.0, "lambda2": 0.0, "target_entropy": False, "pretrain_entropy": False},
    "no_adversarial": {"lambda1": 0.0},
    "dann": {"lambda2": 0.0, "target_entropy": False, "pretrain_entropy": False},
    "dann_entropy": {"lambda2": 0.0},
    "standard_triplet": {"gamma": 0.0},
    "full": {},
}


def variant_config(cfg: RunConfig, variant: str, seed: int) -> RunConfig:
    return replace(cfg, **VARIANTS[variant], seed=seed,
                   out_dir=str(Path(cfg.out_dir) / variant / f"seed_{seed}"))


@dataclass
class CompareRow:
    variant: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def sd(self) -> float:
        # population sd; zero for a single seed
        return float(np.std(self.accuracies))

    @property
    def median(self) -> float:
        return float(np.median(self.accuracies))


def cmd_compare(cfg: RunConfig, variants=tuple(VARIANTS)) -> list[CompareRow]:
    """Variant ladder over ``num_seeds`` seeds; each cell is a separate ``cmd_train`` run."""
    rows = []
    seeds = range(cfg.seed, cfg.seed + cfg.num_seeds)
    for variant in variants:
        accs = [cmd_train(variant_config(cfg, variant, s)).report.target_accuracy for s in seeds]
        rows.append(CompareRow(variant, accs))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    with open(out / "compare.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mean", "sd", "median", "n_seeds"] + [f"seed_{s}" for s in seeds])
        for r in rows:
            w.writerow([r.variant, repr(r.mean), repr(r.sd), repr(r.median), len(r.accuracies)]
                       + [repr(a) for a in r.accuracies])
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name}", f"--{f.name.replace('_', '-')}", dest=f.name,
                       default=None, metavar=_TYPES[f.name].__name__.upper())


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bptriplet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("generate", "write the synthetic task as IDX files plus a manifest"),
        ("train", "pretrain, train and evaluate one model"),
        ("eval", "evaluate a saved checkpoint"),
        ("gradcheck", "compare tape gradients with central differences"),
        ("compare", "run the variant ladder over several seeds"),
    ):
        p = sub.add_parser(name, help=help_)
        _add_config_flags(p)
        if name == "eval":
            p.add_argument("checkpoint")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    file_values = load_config(args.config) if args.config else {}
    overrides = {f.name: parse_value(f.name, getattr(args, f.name))
                 for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return build_config(file_values, overrides)


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.command == "generate":
            print(cmd_generate(cfg))
        elif args.command == "train":
            outcome = cmd_train(cfg)
            for w in outcome.main.log.warnings:
                print(f"warning: {w}", file=sys.stderr)
            print(outcome.report.to_text(), end="")
        elif args.command == "eval":
            print(cmd_eval(cfg, args.checkpoint).to_text(), end="")
        elif args.command == "gradcheck":
            worst = cmd_gradcheck(cfg)
            ok = True
            for c in COMPONENTS:
                passed = worst[c] < GRADCHECK_TOLERANCE
                ok &= passed
                print(f"{c:<6} max_rel_err={worst[c]:.3e} {'PASS' if passed else 'FAIL'}")
            return EXIT_OK if ok else EXIT_GRADCHECK
        elif args.command == "compare":
            for r in cmd_compare(cfg):
                print(f"{r.variant:<17} {100 * r.mean:6.2f} +- {100 * r.sd:5.2f}")
    except tr.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, data.FormatError, nets.CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
