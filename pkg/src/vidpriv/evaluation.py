"""Metrics and the two-step trade-off evaluation protocol.

Step 1 scores the frozen target model on anonymized evaluation clips (the
utility A_T). Step 2 trains N fresh attacker networks -- drawn from the
evaluation half of the budget family, disjoint from the training half --
against the frozen anonymizer and reports their best evaluation score as
the privacy budget A_B. One (A_T, A_B) pair per run is appended to a small
delimited table whose rows print one decimal in percent, backed by a
full-precision companion file.
"""

from __future__ import annotations

import fcntl
import warnings as _warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import losses as L
from . import models as M
from .baselines import FixedTransform
from .data import DatasetSplits, stack_clips
from .optimizers import adam_init, adam_update, _stream

__all__ = [
    "TradeoffPoint",
    "EvalSettings",
    "accuracy",
    "cmap",
    "PRF1Report",
    "prf1_report",
    "evaluate_two_step",
    "run_baseline_point",
    "TABLE_HEADER",
    "append_tradeoff_row",
    "write_tradeoff_table",
    "read_tradeoff_table",
    "format_tradeoff_row",
]


@dataclass(frozen=True)
class TradeoffPoint:
    """One (method, A_T, A_B) record of the trade-off table."""

    method: str
    variant: str
    A_T: float
    A_B: float
    n_attackers: int
    attacker_scores: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("A_T", "A_B"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class EvalSettings:
    """Step-2 attacker training budget and identifiers."""

    n_attackers: int = 4
    atk_iters: int = 2000
    plateau: int = 200
    batch_size: int = 32
    alpha_B: float = 1e-2
    fit_iters: int = 2000
    gate_every: int = 5
    seed: int = 0
    dtype: str = "float32"


def accuracy(predicted, true) -> float:
    """Fraction of exact matches between two equal-length label sequences."""
    p, t = np.asarray(predicted), np.asarray(true)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    if len(p) == 0:
        raise ValueError("need at least one prediction")
    return float(np.mean(p == t))


def _average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    # Descending scores, ties broken by original index (stable).
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = 0
    total = 0.0
    for rank, y in enumerate(ranked, start=1):
        if y:
            hits += 1
            total += hits / rank
    return total / hits


def cmap(scores: np.ndarray, labels: np.ndarray) -> float:
    """Class-based mean average precision over attribute columns.

    Columns without a positive label cannot be ranked and are excluded
    (with a warning); if no column has a positive, that is an error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    if scores.shape[0] < 1:
        raise ValueError("need at least one sample")
    aps = []
    excluded = []
    for a in range(scores.shape[1]):
        if labels[:, a].sum() == 0:
            excluded.append(a)
            continue
        aps.append(_average_precision(scores[:, a], labels[:, a]))
    if excluded:
        _warnings.warn(f"attributes without positives excluded from cMAP: {excluded}")
    if not aps:
        raise ValueError("every attribute column is empty; cMAP undefined")
    return float(np.mean(aps))


@dataclass(frozen=True)
class PRF1Report:
    """Per-attribute precision/recall/F1 plus the four standard averages."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    averages: dict  # name -> (precision, recall, f1)
    zero_division_flags: tuple[str, ...]


def _prf(tp: float, fp: float, fn: float, flags, tag: str):
    if tp + fp == 0:
        flags.append(f"{tag}:precision")
        p = 0.0
    else:
        p = tp / (tp + fp)
    if tp + fn == 0:
        flags.append(f"{tag}:recall")
        r = 0.0
    else:
        r = tp / (tp + fn)
    if p + r == 0:
        flags.append(f"{tag}:f1")
        f = 0.0
    else:
        f = 2 * p * r / (p + r)
    return p, r, f


def prf1_report(predicted: np.ndarray, labels: np.ndarray) -> PRF1Report:
    """Multi-label precision/recall/F1 with micro, macro, weighted and
    samples averages; zero-division cells score 0 and are flagged."""
    pred = np.asarray(predicted)
    lab = np.asarray(labels)
    if pred.shape != lab.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: {pred.shape} vs {lab.shape}")
    n, a = pred.shape
    flags: list[str] = []
    tp = ((pred == 1) & (lab == 1)).sum(axis=0).astype(np.float64)
    fp = ((pred == 1) & (lab == 0)).sum(axis=0).astype(np.float64)
    fn = ((pred == 0) & (lab == 1)).sum(axis=0).astype(np.float64)
    per = [_prf(tp[i], fp[i], fn[i], flags, f"attr{i}") for i in range(a)]
    precision = np.array([x[0] for x in per])
    recall = np.array([x[1] for x in per])
    f1 = np.array([x[2] for x in per])
    averages = {}
    averages["micro"] = _prf(tp.sum(), fp.sum(), fn.sum(), flags, "micro")
    averages["macro"] = (precision.mean(), recall.mean(), f1.mean())
    support = tp + fn
    if support.sum() == 0:
        flags.append("weighted")
        averages["weighted"] = (0.0, 0.0, 0.0)
    else:
        wts = support / support.sum()
        averages["weighted"] = (
            float(precision @ wts),
            float(recall @ wts),
            float(f1 @ wts),
        )
    sp, sr, sf = [], [], []
    for i in range(n):
        tpi = float(((pred[i] == 1) & (lab[i] == 1)).sum())
        fpi = float(((pred[i] == 1) & (lab[i] == 0)).sum())
        fni = float(((pred[i] == 0) & (lab[i] == 1)).sum())
        p_, r_, f_ = _prf(tpi, fpi, fni, flags, f"sample{i}")
        sp.append(p_)
        sr.append(r_)
        sf.append(f_)
    averages["samples"] = (float(np.mean(sp)), float(np.mean(sr)), float(np.mean(sf)))
    return PRF1Report(
        precision=precision,
        recall=recall,
        f1=f1,
        averages=averages,
        zero_division_flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# the two-step protocol


def _apply_anonymizer(theta_or_transform, x: np.ndarray, masks) -> np.ndarray:
    if isinstance(theta_or_transform, FixedTransform):
        return theta_or_transform.apply(x, masks).astype(x.dtype)
    return M.anonymize_batch(theta_or_transform, x)


def _anonymizer_fingerprint(theta_or_transform) -> str:
    if isinstance(theta_or_transform, FixedTransform):
        return f"{theta_or_transform.method}/{theta_or_transform.variant}"
    return M.params_hash(theta_or_transform)


def _budget_scores(theta_b: M.ParameterSet, x: np.ndarray, y, mode: str) -> float:
    logits = M.predict_budget_batch(theta_b, x)
    if mode == "single_class":
        return accuracy(np.argmax(logits, axis=1), y)
    return cmap(logits, y)


def _fit_attacker(spec, seed: int, x: np.ndarray, y, cfg: EvalSettings) -> M.ParameterSet:
    """Train one budget model to convergence against fixed anonymized clips:
    a fixed step budget with early stop once the train loss plateaus."""
    params = M.init_params(spec, seed, dtype=np.dtype(cfg.dtype))
    adam = adam_init(params)
    rng = _stream(seed, 3)
    best = np.inf
    stale = 0
    for _ in range(cfg.atk_iters):
        idx = rng.integers(0, len(x), size=cfg.batch_size)
        logits, cache = M._budget_forward(params, x[idx])
        lv, dlog = L.cross_entropy_grad(logits, y[idx])
        _, grads = M._budget_backward(params, cache, dlog)
        params, adam = adam_update(params, grads, adam, cfg.alpha_B)
        if lv.value < best:
            best = lv.value
            stale = 0
        else:
            stale += 1
            if stale >= cfg.plateau:
                break
    return params


def evaluate_two_step(
    theta_a_star,
    theta_t_star: M.ParameterSet,
    data: DatasetSplits,
    n_attackers: int,
    cfg: EvalSettings | None = None,
    method: str | None = None,
    variant: str = "",
) -> TradeoffPoint:
    """Freeze the anonymizer, measure utility, then re-sample fresh attackers.

    theta_a_star may be a trained anonymizer ParameterSet or a FixedTransform
    baseline. Attackers are trained on the anonymized training split (the
    anonymizer stays fixed) and scored on the anonymized evaluation split;
    the final budget score is the maximum over attackers.
    """
    if cfg is None:
        cfg = EvalSettings(n_attackers=n_attackers)
    if n_attackers < 1:
        raise ValueError("n_attackers must be >= 1")
    dtype = np.dtype(cfg.dtype)
    fingerprint = _anonymizer_fingerprint(theta_a_star)

    x_tr, _, y_b_tr = stack_clips(data.train, dtype)
    x_ev, y_t_ev, y_b_ev = stack_clips(data.eval, dtype)
    xa_tr = _apply_anonymizer(theta_a_star, x_tr, data.train.masks)
    xa_ev = _apply_anonymizer(theta_a_star, x_ev, data.eval.masks)

    # Step 1: utility of the frozen target model on anonymized eval clips.
    logits_t = M.predict_target_batch(theta_t_star, xa_ev)
    a_t = accuracy(np.argmax(logits_t, axis=1), y_t_ev)

    # Step 2: attackers from the evaluation grid (disjoint from training).
    mode = data.train.budget_mode
    n_out = (
        data.train.num_budget_classes if mode == "single_class" else y_b_tr.shape[1]
    )
    base = M.budget_base_arch(n_out, in_channels=x_tr.shape[-1])
    train_grid, _ = M.family_grids(base)
    specs = M.budget_family(n_attackers, base, split="eval")
    overlap = set(specs) & set(train_grid)
    assert not overlap, f"evaluation attackers overlap the training grid: {overlap}"

    scores = []
    for i, spec in enumerate(specs):
        seed = int(
            np.random.SeedSequence((cfg.seed, 0xA77, i)).generate_state(1, dtype=np.uint64)[0]
        )
        attacker = _fit_attacker(spec, seed, xa_tr, y_b_tr, cfg)
        scores.append(_budget_scores(attacker, xa_ev, y_b_ev, mode))

    assert _anonymizer_fingerprint(theta_a_star) == fingerprint, "theta_A changed during evaluation"
    return TradeoffPoint(
        method=method if method is not None else _default_method(theta_a_star),
        variant=variant or _default_variant(theta_a_star),
        A_T=a_t,
        A_B=float(max(scores)),
        n_attackers=n_attackers,
        attacker_scores=tuple(scores),
    )


def _default_method(theta_or_transform) -> str:
    if isinstance(theta_or_transform, FixedTransform):
        return theta_or_transform.method
    return "learned"


def _default_variant(theta_or_transform) -> str:
    if isinstance(theta_or_transform, FixedTransform):
        return theta_or_transform.variant
    return ""


def fit_target_supervised(
    x_tr: np.ndarray,
    y_tr: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    num_classes: int,
    th_t: float,
    cfg: EvalSettings,
) -> M.ParameterSet:
    """Plain supervised training of a target model on (already transformed)
    clips; stops when validation accuracy clears the threshold or the step
    budget runs out."""
    arch = M.target_arch(num_classes, in_channels=x_tr.shape[-1])
    seed = int(np.random.SeedSequence((cfg.seed, 0x7A6)).generate_state(1, dtype=np.uint64)[0])
    params = M.init_params(arch, seed, dtype=np.dtype(cfg.dtype))
    adam = adam_init(params)
    rng = _stream(seed, 4)
    for step in range(cfg.fit_iters):
        if step % cfg.gate_every == 0:
            logits = M.predict_target_batch(params, x_val)
            if accuracy(np.argmax(logits, axis=1), y_val) > th_t:
                break
        idx = rng.integers(0, len(x_tr), size=cfg.batch_size)
        logits, cache = M._target_forward(params, x_tr[idx])
        lv, dlog = L.cross_entropy_grad(logits, y_tr[idx])
        _, grads = M._target_backward(params, cache, dlog)
        params, adam = adam_update(params, grads, adam, 1e-3)
    return params


def run_baseline_point(
    transform: FixedTransform,
    data: DatasetSplits,
    cfg,
    eval_cfg: EvalSettings | None = None,
) -> TradeoffPoint:
    """Trade-off point of a fixed transform: train a target model on the
    transformed training split, then run the two-step evaluation with the
    transform standing in for the learned anonymizer."""
    if not isinstance(transform, FixedTransform):
        raise ValueError("transform must be a FixedTransform")
    if eval_cfg is None:
        eval_cfg = EvalSettings()
    dtype = np.dtype(eval_cfg.dtype)
    x_tr, y_t_tr, _ = stack_clips(data.train, dtype)
    x_val, y_t_val, _ = stack_clips(data.val, dtype)
    xt_tr = transform.apply(x_tr, data.train.masks).astype(dtype)
    xt_val = transform.apply(x_val, data.val.masks).astype(dtype)
    theta_t = fit_target_supervised(
        xt_tr, y_t_tr, xt_val, y_t_val, data.train.num_target_classes, cfg.th_T, eval_cfg
    )
    return evaluate_two_step(
        transform, theta_t, data, eval_cfg.n_attackers, eval_cfg,
        method=transform.method, variant=transform.variant,
    )


# ---------------------------------------------------------------------------
# trade-off table io

TABLE_HEADER = "method,variant,A_T,A_B,n_attackers"
_FULL_SUFFIX = ".full"


def format_tradeoff_row(p: TradeoffPoint) -> str:
    """Percent values with one decimal, mirroring the published tables."""
    return f"{p.method},{p.variant},{100 * p.A_T:.1f},{100 * p.A_B:.1f},{p.n_attackers}"


def _format_full_row(p: TradeoffPoint) -> str:
    return f"{p.method},{p.variant},{p.A_T!r},{p.A_B!r},{p.n_attackers}"


def _parse_row(line: str, full: bool) -> TradeoffPoint:
    parts = line.rstrip("\n").split(",")
    if len(parts) != 5:
        raise ValueError(f"malformed trade-off row: {line!r}")
    method, variant, a_t, a_b, n = parts
    scale = 1.0 if full else 100.0
    return TradeoffPoint(
        method=method,
        variant=variant,
        A_T=float(a_t) / scale,
        A_B=float(a_b) / scale,
        n_attackers=int(n),
    )


def _locked_append(path: Path, lines: list[str]) -> None:
    with open(path, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            if fh.tell() == 0:
                fh.write(TABLE_HEADER + "\n")
            fh.writelines(line + "\n" for line in lines)
            fh.flush()
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def append_tradeoff_row(path, point: TradeoffPoint) -> None:
    """Append one row to the table and its full-precision companion,
    under a file lock so concurrent runs can share one table."""
    path = Path(path)
    _locked_append(path, [format_tradeoff_row(point)])
    _locked_append(Path(str(path) + _FULL_SUFFIX), [_format_full_row(point)])


def write_tradeoff_table(path, points, force: bool = False) -> None:
    path = Path(path)
    full = Path(str(path) + _FULL_SUFFIX)
    for p in (path, full):
        if p.exists() and not force:
            raise FileExistsError(f"{p} exists; pass force=True to overwrite")
        if p.exists():
            p.unlink()
    _locked_append(path, [format_tradeoff_row(p) for p in points])
    _locked_append(full, [_format_full_row(p) for p in points])


def read_tradeoff_table(path, full: bool | None = None) -> list[TradeoffPoint]:
    """Parse a trade-off table; prefers the full-precision companion when
    present (pass full=False to force the percent table)."""
    path = Path(path)
    companion = Path(str(path) + _FULL_SUFFIX)
    if full is None:
        full = companion.exists()
    target = companion if full else path
    points = []
    with open(target) as fh:
        for i, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line or (i == 0 and line == TABLE_HEADER):
                continue
            try:
                points.append(_parse_row(line, full))
            except ValueError as exc:
                raise ValueError(f"{target}:{i + 1}: {exc}") from exc
    return points
