"""Experiment driver: config parsing, run orchestration, persistence, and
trade-off table emission.

Subcommands: ``train`` (one adversarial training run), ``baseline`` (a fixed
transform instead of the learned anonymizer), ``evaluate`` (re-score saved
checkpoints with fresh attackers), ``stats`` (dataset statistics), and
``plotdata`` (scatter-ready file from a trade-off table). Each train or
baseline run appends exactly one row to the shared trade-off table.

Configuration is a flat key=value text file; command-line flags override
file values; unknown keys are rejected. The default profile carries the
single-dataset experiment settings (th_T=0.85, th_B=0.99, gamma=2); the
``ucf``/``hmdb`` profiles carry the cross-dataset ones; the ``toy`` profile
scales the iteration budgets down to desk size.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import shutil
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import baselines as B
from . import data as D
from . import evaluation as E
from . import optimizers as O
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "run_experiment",
    "emit_plotdata",
    "main",
]

ENV_OUTDIR = "VIDPRIV_OUTDIR"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    train: O.TrainConfig
    eval: E.EvalSettings
    dataset: str = "toy"
    data_seed: int = 0
    n_clips: int = 120
    t: int = 8
    side: int = 32
    outdir: str = "runs"
    baseline: str | None = None
    method_set: bool = False
    force: bool = False

    def __post_init__(self):
        if self.baseline is not None and self.method_set:
            raise ConfigError("set exactly one of 'method' and 'baseline' per run")


_PROFILES = {
    # Single-dataset identity-budget experiment settings.
    "sbu": {},
    # Cross-dataset attribute experiments.
    "ucf": {"th_T": 0.70, "gamma": 0.5},
    "hmdb": {"th_T": 0.70, "th_B": 0.95, "gamma": 0.5},
    # Desk-scale settings for the toy dataset (tuned for minutes, not days).
    "toy": {
        "th_T": 0.85,
        "th_B": 0.95,
        "gamma": 2.0,
        "alpha_A": 3e-3,
        "alpha_T": 1e-3,
        "alpha_B": 1e-2,
        "max_iter": 150,
        "rstrt_iter": 30,
        "d_iter": 10,
        "inner_cap": 60,
        "n_attackers": 4,
        "atk_iters": 1200,
        "fit_iters": 1500,
    },
}

_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(O.TrainConfig)}
_EVAL_KEYS = {
    "n_attackers": ("n_attackers", int),
    "atk_iters": ("atk_iters", int),
    "atk_plateau": ("plateau", int),
    "atk_batch_size": ("batch_size", int),
    "fit_iters": ("fit_iters", int),
}
_DATA_KEYS = {"dataset": str, "data_seed": int, "n_clips": int, "t": int, "side": int}
_RUN_KEYS = {"outdir": str, "baseline": str}

_BOOL_FIELDS = {"restarting", "plain_sgd", "disable_budget"}


def _coerce(key: str, value, kind):
    if isinstance(value, str):
        value = value.strip()
    try:
        if kind is bool or key in _BOOL_FIELDS:
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes", "on"):
                return True
            if str(value).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind is int or kind == "int":
            return int(value)
        if kind is float or kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def _field_kind(key: str):
    t = _TRAIN_FIELDS[key]
    name = t if isinstance(t, str) else getattr(t, "__name__", str(t))
    if key in _BOOL_FIELDS:
        return bool
    if "int" in name:
        return int
    if "float" in name:
        return float
    return str


def _read_kv_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from an optional key=value file plus flag
    overrides (flags win). Unknown keys are rejected by name."""
    raw: dict = {}
    if path is not None:
        raw.update(_read_kv_file(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v

    profile = str(raw.pop("profile", "sbu"))
    if profile not in _PROFILES:
        raise ConfigError(f"unknown profile {profile!r} (choose from {sorted(_PROFILES)})")
    merged: dict = dict(_PROFILES[profile])
    method_set = "method" in raw
    merged.update(raw)

    train_kwargs: dict = {}
    eval_kwargs: dict = {}
    exp_kwargs: dict = {}
    for key, value in merged.items():
        if key in _TRAIN_FIELDS:
            train_kwargs[key] = _coerce(key, value, _field_kind(key))
        elif key in _EVAL_KEYS:
            field, kind = _EVAL_KEYS[key]
            eval_kwargs[field] = _coerce(key, value, kind)
        elif key in _DATA_KEYS:
            exp_kwargs[key] = _coerce(key, value, _DATA_KEYS[key])
        elif key in _RUN_KEYS:
            exp_kwargs[key] = _coerce(key, value, _RUN_KEYS[key])
        elif key == "force":
            exp_kwargs[key] = _coerce(key, value, bool)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        train = O.TrainConfig(**train_kwargs)
        eval_cfg = E.EvalSettings(
            seed=train.seed, dtype=train.dtype, batch_size=train.batch_size, **eval_kwargs
        )
        return ExperimentConfig(
            train=train, eval=eval_cfg, method_set=method_set, **exp_kwargs
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# run orchestration


def _load_splits(cfg: ExperimentConfig) -> D.DatasetSplits:
    if cfg.dataset == "toy":
        full = D.generate_toy_dataset(cfg.data_seed, cfg.n_clips, cfg.t, cfg.side)
        return D.split_dataset(full)
    sets = D.load_clip_directory(cfg.dataset)
    for split in ("train", "val", "eval"):
        if split not in sets:
            raise ConfigError(f"dataset at {cfg.dataset} is missing the {split!r} split")
    return D.DatasetSplits(train=sets["train"], val=sets["val"], eval=sets["eval"])


def _method_tags(cfg: O.TrainConfig) -> tuple[str, str]:
    plus = "+" if cfg.restarting else ""
    if cfg.method == "grl":
        return "grl", plus
    if cfg.method == "kbeam":
        return "kbeam", f"K={cfg.K}{plus}"
    return "entropy", f"M={cfg.M}{plus}"


def _run_name(cfg: ExperimentConfig) -> str:
    if cfg.baseline is not None:
        tag = cfg.baseline.replace("=", "")
        return f"baseline-{tag}-seed{cfg.train.seed}"
    method, variant = _method_tags(cfg.train)
    tag = variant.replace("=", "") or "plain"
    return f"{method}-{tag}-seed{cfg.train.seed}"


def _baseline_transform(tag: str) -> B.FixedTransform:
    tag = tag.strip()
    if tag == "identity":
        return B.identity_transform()
    if tag.startswith("r="):
        return B.downsample_transform(int(tag[2:]))
    if tag.upper() in B.OBFUSCATION_CODES:
        return B.obfuscation_transform(tag.upper())
    raise ConfigError(
        f"unknown baseline {tag!r} (expected identity, r=<rate>, or an obfuscation code)"
    )


class RunSink:
    """Streams trace records to trace.jsonl and saves periodic checkpoints."""

    def __init__(self, run_dir: Path):
        self.run_dir = run_dir
        self._fh = open(run_dir / "trace.jsonl", "w")

    def record(self, rec: O.TraceRecord) -> None:
        self._fh.write(rec.to_json() + "\n")
        self._fh.flush()

    def checkpoint(self, iteration, theta_a, theta_t, ensemble) -> None:
        save_checkpoint(self.run_dir / f"anonymizer_{iteration:06d}.ckpt", theta_a, iteration)
        save_checkpoint(self.run_dir / f"target_{iteration:06d}.ckpt", theta_t, iteration)
        if ensemble is not None:
            for i, member in enumerate(ensemble.members):
                save_checkpoint(
                    self.run_dir / f"budget{i}_{iteration:06d}.ckpt", member, iteration
                )

    def close(self) -> None:
        self._fh.close()


def _dump_config(cfg: ExperimentConfig, path: Path) -> None:
    lines = []
    for f in dataclasses.fields(cfg.train):
        lines.append(f"{f.name} = {getattr(cfg.train, f.name)}")
    for key, (field, _) in _EVAL_KEYS.items():
        lines.append(f"{key} = {getattr(cfg.eval, field)}")
    for key in _DATA_KEYS:
        lines.append(f"{key} = {getattr(cfg, key)}")
    lines.append(f"outdir = {cfg.outdir}")
    if cfg.baseline is not None:
        lines.append(f"baseline = {cfg.baseline}")
    path.write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one training or baseline experiment end to end; returns an exit
    status (0 ok, 1 numeric abort, 3 refused to overwrite)."""
    out_root = Path(cfg.outdir)
    run_dir = out_root / _run_name(cfg)
    if run_dir.exists():
        if not cfg.force:
            print(
                f"error: {run_dir} already exists; rerun with --force to overwrite",
                file=sys.stderr,
            )
            return 3
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True)
    _dump_config(cfg, run_dir / "config.txt")

    splits = _load_splits(cfg)
    table = out_root / "tradeoff.csv"

    if cfg.baseline is not None:
        transform = _baseline_transform(cfg.baseline)
        point = E.run_baseline_point(transform, splits, cfg.train, cfg.eval)
        E.append_tradeoff_row(table, point)
        (run_dir / "point.csv").write_text(
            E.TABLE_HEADER + "\n" + E.format_tradeoff_row(point) + "\n"
        )
        print(E.format_tradeoff_row(point))
        return 0

    runner = {"grl": O.train_grl, "kbeam": O.train_kbeam, "entropy": O.train_entropy}[
        cfg.train.method
    ]
    sink = RunSink(run_dir)
    try:
        theta_a, theta_t, budget, trace = runner(splits, cfg.train, sink)
    except O.NumericError as exc:
        sink.close()
        print(f"error: {exc} (trace flushed to {run_dir / 'trace.jsonl'})", file=sys.stderr)
        return 1
    sink.close()
    save_checkpoint(run_dir / "anonymizer_final.ckpt", theta_a, cfg.train.max_iter)
    save_checkpoint(run_dir / "target_final.ckpt", theta_t, cfg.train.max_iter)
    method, variant = _method_tags(cfg.train)
    point = E.evaluate_two_step(
        theta_a, theta_t, splits, cfg.eval.n_attackers, cfg.eval,
        method=method, variant=variant,
    )
    E.append_tradeoff_row(table, point)
    (run_dir / "point.csv").write_text(
        E.TABLE_HEADER + "\n" + E.format_tradeoff_row(point) + "\n"
    )
    print(E.format_tradeoff_row(point))
    return 0


def evaluate_run(run_dir, n_attackers: int | None = None) -> int:
    """Re-evaluate a finished run's checkpoints with freshly sampled attackers."""
    run_dir = Path(run_dir)
    cfg = parse_config(run_dir / "config.txt")
    theta_a, _ = load_checkpoint(run_dir / "anonymizer_final.ckpt")
    theta_t, _ = load_checkpoint(run_dir / "target_final.ckpt")
    splits = _load_splits(cfg)
    n = n_attackers if n_attackers is not None else cfg.eval.n_attackers
    method, variant = _method_tags(cfg.train)
    point = E.evaluate_two_step(theta_a, theta_t, splits, n, cfg.eval, method=method, variant=variant)
    E.append_tradeoff_row(run_dir.parent / "tradeoff.csv", point)
    print(E.format_tradeoff_row(point))
    return 0


# ---------------------------------------------------------------------------
# plot data


def _marker_key(variant: str) -> int:
    v = variant.rstrip("+")
    if "=" in v:
        try:
            return int(v.split("=", 1)[1])
        except ValueError:
            return 1
    return 1


def emit_plotdata(table_path, out_path) -> int:
    """Convert a trade-off table into a scatter-ready file of
    (method, variant, A_B, A_T, marker size), plus the reference values of
    the non-anonymized baseline when an identity row exists."""
    points = E.read_tradeoff_table(table_path)
    ref = None
    for p in points:
        if p.method == "identity" or (p.method == "downsample" and p.variant == "r=1"):
            ref = p
            break
    lines = []
    if ref is not None:
        lines.append(f"# ref_A_T = {ref.A_T!r}")
        lines.append(f"# ref_A_B = {ref.A_B!r}")
    lines.append("method,variant,A_B,A_T,marker")
    for p in points:
        lines.append(f"{p.method},{p.variant},{p.A_B!r},{p.A_T!r},{_marker_key(p.variant)}")
    Path(out_path).write_text("\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--profile", help="defaults profile (sbu, ucf, hmdb, toy)")
    parser.add_argument("--out", dest="outdir", help="output root directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--max-iter", dest="max_iter", type=int)
    parser.add_argument("--n-attackers", dest="n_attackers", type=int)
    parser.add_argument("--dataset")
    parser.add_argument("--data-seed", dest="data_seed", type=int)
    parser.add_argument("--force", action="store_true", default=None)


def _collect_overrides(args: argparse.Namespace, skip=("command", "config")) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        out[key] = value
    return out


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vidpriv",
        description="Adversarial training and evaluation of video anonymization transforms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one adversarial training experiment")
    _add_common(p_train)
    p_train.add_argument("--method", choices=O.METHODS)
    p_train.add_argument("--ensemble", dest="M", type=int, help="ensemble size M")
    p_train.add_argument("--beams", dest="K", type=int, help="beam count K")
    p_train.add_argument("--restart", dest="restarting", action="store_true", default=None)
    p_train.add_argument("--rstrt-iter", dest="rstrt_iter", type=int)

    p_base = sub.add_parser("baseline", help="evaluate a fixed anonymization baseline")
    _add_common(p_base)
    group = p_base.add_mutually_exclusive_group(required=True)
    group.add_argument("--downsample", type=int, metavar="R")
    group.add_argument("--obfuscation", metavar="CODE")
    group.add_argument("--identity", action="store_true")

    p_eval = sub.add_parser("evaluate", help="re-evaluate a run's saved checkpoints")
    p_eval.add_argument("--run", required=True, help="run directory")
    p_eval.add_argument("--n-attackers", dest="n_attackers", type=int)

    p_stats = sub.add_parser("stats", help="dataset statistics")
    p_stats.add_argument("--annotations", help="per-video annotation file (JSONL)")
    p_stats.add_argument("--toy", action="store_true", help="toy dataset statistics")
    p_stats.add_argument("--data-seed", dest="data_seed", type=int, default=0)
    p_stats.add_argument("--n-clips", dest="n_clips", type=int, default=120)
    p_stats.add_argument("--t", type=int, default=8)
    p_stats.add_argument("--side", type=int, default=32)
    p_stats.add_argument("--correlation", action="store_true")

    p_plot = sub.add_parser("plotdata", help="emit scatter-ready data from a table")
    p_plot.add_argument("--table", required=True)
    p_plot.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    try:
        if args.command in ("train", "baseline"):
            overrides = _collect_overrides(
                args, skip=("command", "config", "downsample", "obfuscation", "identity", "force")
            )
            if args.command == "baseline":
                if args.identity:
                    overrides["baseline"] = "identity"
                elif args.downsample is not None:
                    overrides["baseline"] = f"r={args.downsample}"
                else:
                    overrides["baseline"] = args.obfuscation
            if "outdir" not in overrides and not (
                args.config and "outdir" in _read_kv_file(args.config)
            ):
                overrides["outdir"] = os.environ.get(ENV_OUTDIR, "runs")
            cfg = parse_config(args.config, overrides)
            if args.force:
                cfg = replace(cfg, force=True)
            return run_experiment(cfg)
        if args.command == "evaluate":
            return evaluate_run(args.run, args.n_attackers)
        if args.command == "stats":
            return _stats_command(args)
        if args.command == "plotdata":
            return emit_plotdata(args.table, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


def _stats_command(args: argparse.Namespace) -> int:
    if args.annotations:
        records = D.load_privacy_annotations(args.annotations)
        counts = D.annotation_action_counts(records)
        print("action,videos")
        for action in sorted(counts):
            print(f"{action},{counts[action]}")
        if args.correlation:
            table = D.action_attribute_correlation(D.dataset_from_annotations(records))
            print("action,attribute,value,ratio")
            ds = D.dataset_from_annotations(records)
            for ai, action_id in enumerate(table.actions):
                name = ds.action_names[action_id]
                for ci, (attr, value) in enumerate(table.columns):
                    r = table.ratios[ai, ci]
                    if not np.isnan(r):
                        print(f"{name},{attr},{value},{r:.4f}")
        return 0
    if args.toy:
        dataset = D.generate_toy_dataset(args.data_seed, args.n_clips, args.t, args.side)
        hist = D.action_distribution(dataset)
        print("action,videos")
        for cls in sorted(hist):
            print(f"{dataset.action_names[cls]},{hist[cls]}")
        return 0
    print("error: pass --annotations FILE or --toy", file=sys.stderr)
    return 2
