"""The three alternating minimax schemes, plus restarting and ensembling.

Per outer iteration the schemes differ in how the anonymizer moves:

* GRL            -- one anonymizer step down the hybrid objective
                    L_T - gamma * L_B, then threshold-gated inner loops
                    training the target (alone) and the budget model;
* K-Beam         -- joint (anonymizer, target) descent on L_T, then an
                    ascent phase where the anonymizer climbs the budget loss
                    of the strongest (lowest-loss) beam for d_iter steps,
                    then every beam descends its own budget loss;
* Entropy        -- one anonymizer step down L_T - gamma * H_B where H_B is
                    the prediction entropy of the most confident (lowest
                    entropy) ensemble member, then joint (anonymizer,
                    target) descent on L_T, then every member descends its
                    own budget loss.

Restarting reinitializes all budget models every ``rstrt_iter`` outer
iterations, from seeds derived only from (config seed, restart counter,
member slot), never from the training state. The threshold-gated inner
loops of the pseudocode can spin forever when a threshold is unreachable,
so every inner loop carries a hard cap and logs a warning when it binds.

Trainers are written against a small engine interface (see ConvEngine) so
the update rules can be exercised on hand-built scalar problems in tests.
One trainer owns all parameter state; budget members see per-slot RNG
streams and a frozen anonymizer during their updates, which makes the
member phase order-independent.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import models as M
from .data import DatasetSplits, stack_clips

__all__ = [
    "TrainConfig",
    "TraceRecord",
    "TrainTrace",
    "NumericError",
    "AdamState",
    "adam_init",
    "adam_update",
    "EnsembleState",
    "restart_members",
    "restart_seed",
    "select_strongest_beam",
    "select_min_entropy",
    "ConvEngine",
    "run_grl",
    "run_kbeam",
    "run_entropy",
    "train_grl",
    "train_kbeam",
    "train_entropy",
]

METHODS = ("grl", "kbeam", "entropy")


class NumericError(RuntimeError):
    """Non-finite loss or gradient; carries the trace collected so far."""

    def __init__(self, message: str, trace: "TrainTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    """All scalars of the training algorithms."""

    method: str = "entropy"
    alpha_A: float = 1e-4
    alpha_T: float = 1e-5
    alpha_B: float = 1e-2
    th_T: float = 0.85
    th_B: float = 0.99
    gamma: float = 2.0
    max_iter: int = 800
    d_iter: int = 30
    rstrt_iter: int = 100
    inner_cap: int = 200
    gate_every: int = 5
    gate_batch: int = 512
    K: int = 1
    M: int = 1
    seed: int = 0
    restarting: bool = False
    batch_size: int = 32
    ckpt_every: int = 100
    plain_sgd: bool = False
    disable_budget: bool = False
    post_restart_warmup: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        for name in ("alpha_A", "alpha_T", "alpha_B"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("th_T", "th_B"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        for name in ("max_iter", "d_iter", "rstrt_iter", "inner_cap", "K", "M", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class TraceRecord:
    """One structured record per outer iteration."""

    iter: int
    restarted: bool
    selected: int | None
    loss_T: float
    budget_term: float | None
    acc_T: float
    acc_B: tuple[float, ...]
    steps_T: int
    steps_B: tuple[int, ...]
    warnings: tuple[str, ...] = ()
    restart_hashes: tuple[str, ...] = ()

    def to_json(self) -> str:
        d = asdict(self)
        for k in ("acc_B", "steps_B", "warnings", "restart_hashes"):
            d[k] = list(d[k])
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TraceRecord":
        d = json.loads(line)
        for k in ("acc_B", "steps_B", "warnings", "restart_hashes"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class TrainTrace:
    method: str
    records: list[TraceRecord] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str, method: str = "") -> "TrainTrace":
        recs = [TraceRecord.from_json(line) for line in text.splitlines() if line.strip()]
        return cls(method=method, records=recs)

    def restart_iterations(self) -> list[int]:
        return [r.iter for r in self.records if r.restarted]


# ---------------------------------------------------------------------------
# parameter updates


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: M.ParameterSet) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(w) for k, w in params.weights.items()},
        v={k: np.zeros_like(w) for k, w in params.weights.items()},
    )


def _check_finite_grads(grads: dict) -> None:
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k!r}")


def adam_update(
    params: M.ParameterSet,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[M.ParameterSet, AdamState]:
    """One adaptive-moment step; returns fresh parameters and state."""
    _check_finite_grads(grads)
    t = state.t + 1
    new_w, new_m, new_v = {}, {}, {}
    for k, w in params.weights.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        new_w[k] = (w - lr * mhat / (np.sqrt(vhat) + eps)).astype(w.dtype)
        new_m[k], new_v[k] = m, v
    return (
        M.ParameterSet(arch=params.arch, weights=new_w, seed=params.seed),
        AdamState(m=new_m, v=new_v, t=t),
    )


def sgd_update(params: M.ParameterSet, grads: dict, lr: float) -> M.ParameterSet:
    """Plain descent step (test mode: makes the update-rule oracles exact)."""
    _check_finite_grads(grads)
    new_w = {k: (w - lr * grads[k]).astype(w.dtype) for k, w in params.weights.items()}
    return M.ParameterSet(arch=params.arch, weights=new_w, seed=params.seed)


def _apply_step(params, grads, state, lr, cfg: TrainConfig, ascent: bool = False):
    if ascent:
        grads = {k: -g for k, g in grads.items()}
    if cfg.plain_sgd:
        return sgd_update(params, grads, lr), state
    return adam_update(params, grads, state, lr)


# ---------------------------------------------------------------------------
# ensembles and restarting


@dataclass
class EnsembleState:
    """Budget models tracked during training (M ensemble members or K beams),
    each with its own optimizer state; remembers every init seed ever used."""

    members: tuple[M.ParameterSet, ...]
    adam: tuple[AdamState, ...]
    used_seeds: tuple[int, ...]

    def __post_init__(self):
        outs = {m.arch.num_outputs for m in self.members}
        if len(outs) > 1:
            raise ValueError("ensemble members disagree on num_outputs")
        if len({m.arch for m in self.members}) != len(self.members):
            raise ValueError("ensemble members must have distinct architectures")

    def hashes(self) -> tuple[str, ...]:
        return tuple(M.params_hash(m) for m in self.members)


def restart_seed(base_seed: int, event: int, slot: int) -> int:
    """Deterministic fresh init seed for a restart event; depends only on the
    config seed, the restart counter and the member slot."""
    ss = np.random.SeedSequence((base_seed, 0xF5, event, slot))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def restart_members(ensemble: EnsembleState, seeds: list[int]) -> EnsembleState:
    """Reinitialize every member from a fresh seed; optimizer moments reset."""
    if len(seeds) != len(ensemble.members):
        raise ValueError("need one seed per member")
    if len(set(seeds)) != len(seeds) or any(s in ensemble.used_seeds for s in seeds):
        raise ValueError("restart seeds must be fresh (unused so far)")
    members = tuple(
        M.init_params(m.arch, s, dtype=m.dtype) for m, s in zip(ensemble.members, seeds)
    )
    return EnsembleState(
        members=members,
        adam=tuple(adam_init(m) for m in members),
        used_seeds=ensemble.used_seeds + tuple(seeds),
    )


def select_strongest_beam(beam_losses) -> int:
    """K-Beam selection: the beam with the lowest budget loss (ties: lowest index)."""
    return int(np.argmin(np.asarray(beam_losses)))


def select_min_entropy(entropies) -> int:
    """Entropy-scheme selection: the member with the lowest prediction entropy,
    i.e. the most confident attacker (ties: lowest index)."""
    return int(np.argmin(np.asarray(entropies)))


# ---------------------------------------------------------------------------
# the packaged engine: conv nets + clip datasets


def _stream(seed: int, *tag) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *tag))))


class ConvEngine:
    """Wires the three conv networks and a split dataset to the trainers.

    Exposes exactly the operations the algorithms need: hybrid gradients for
    the anonymizer, (joint) target gradients, per-member budget gradients
    against a cached anonymized training set, and the two accuracy gates.
    Every batch comes from a named deterministic RNG stream; each member
    slot owns one, so member updates are isolated from each other.
    """

    def __init__(self, splits: DatasetSplits, cfg: TrainConfig):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        train, val = splits.train, splits.val
        self.budget_mode = train.budget_mode
        self.x_train, self.y_t_train, self.y_b_train = stack_clips(train, self.dtype)
        self.x_val, self.y_t_val, _ = stack_clips(val, self.dtype)
        c = train.clip_shape[-1]
        self.anon_arch = M.anonymizer_arch(in_channels=c)
        self.target_arch_ = M.target_arch(train.num_target_classes, in_channels=c)
        n_budget_out = (
            train.num_budget_classes
            if self.budget_mode == "single_class"
            else self.y_b_train.shape[1]
        )
        self.budget_base = M.budget_base_arch(n_budget_out, in_channels=c)
        self._rng_main = _stream(cfg.seed, 0)
        self._rng_members: dict[int, np.random.Generator] = {}
        gate_rng = _stream(cfg.seed, 1)
        self._gate_idx_val = gate_rng.permutation(len(self.x_val))[: cfg.gate_batch]
        self._gate_idx_train = gate_rng.permutation(len(self.x_train))[: cfg.gate_batch]
        self._anon_cache: np.ndarray | None = None
        self._entropy_mode = "softmax" if self.budget_mode == "single_class" else "binary"

    # --- initialization ----------------------------------------------------

    def init_anonymizer(self) -> M.ParameterSet:
        return M.init_params(self.anon_arch, restart_seed(self.cfg.seed, 0, 100), self.dtype)

    def init_target(self) -> M.ParameterSet:
        return M.init_params(self.target_arch_, restart_seed(self.cfg.seed, 0, 101), self.dtype)

    def init_ensemble(self, m: int) -> EnsembleState:
        specs = M.budget_family(m, self.budget_base, split="train")
        seeds = [restart_seed(self.cfg.seed, 0, slot) for slot in range(m)]
        members = tuple(M.init_params(a, s, self.dtype) for a, s in zip(specs, seeds))
        return EnsembleState(
            members=members,
            adam=tuple(adam_init(p) for p in members),
            used_seeds=tuple(seeds),
        )

    def restart_ensemble(self, ensemble: EnsembleState, event: int) -> EnsembleState:
        seeds = [
            restart_seed(self.cfg.seed, event, slot) for slot in range(len(ensemble.members))
        ]
        return restart_members(ensemble, seeds)

    def _member_rng(self, slot: int) -> np.random.Generator:
        if slot not in self._rng_members:
            self._rng_members[slot] = _stream(self.cfg.seed, 2, slot)
        return self._rng_members[slot]

    def _batch(self, rng, x, *labels):
        idx = rng.integers(0, len(x), size=self.cfg.batch_size)
        return (x[idx],) + tuple(y[idx] for y in labels)

    # --- gradient evaluations ----------------------------------------------

    def _budget_loss_grad(self, logits, y):
        return L.cross_entropy_grad(logits, y)

    def grl_hybrid(self, a, t, b, gamma):
        """(L_T, L_B, anonymizer grads of L_T - gamma * L_B) on one batch."""
        x, y_t, y_b = self._batch(self._rng_main, self.x_train, self.y_t_train, self.y_b_train)
        ya, cache_a = M._anonymizer_forward(a, x)
        logits_t, cache_t = M._target_forward(t, ya)
        lt, dlog_t = L.cross_entropy_grad(logits_t, y_t)
        dya_t, _ = M._target_backward(t, cache_t, dlog_t)
        logits_b, cache_b = M._budget_forward(b, ya)
        lb, dlog_b = self._budget_loss_grad(logits_b, y_b)
        dya_b, _ = M._budget_backward(b, cache_b, dlog_b)
        dya = dya_t - gamma * dya_b
        _, grads_a = M._anonymizer_backward(a, cache_a, dya)
        return lt.value, lb.value, grads_a

    def entropy_hybrid(self, a, t, members, gamma, select_fn):
        """(L_T, member entropies, selected index, anonymizer grads of
        L_T - gamma * H_B(selected)) on one batch."""
        x, y_t = self._batch(self._rng_main, self.x_train, self.y_t_train)
        ya, cache_a = M._anonymizer_forward(a, x)
        logits_t, cache_t = M._target_forward(t, ya)
        lt, dlog_t = L.cross_entropy_grad(logits_t, y_t)
        dya_t, _ = M._target_backward(t, cache_t, dlog_t)
        ents, caches, dlogs = [], [], []
        for b in members:
            logits_b, cache_b = M._budget_forward(b, ya)
            hv, dlog_h = L.prediction_entropy_grad(logits_b, mode=self._entropy_mode)
            ents.append(hv.value)
            caches.append(cache_b)
            dlogs.append(dlog_h)
        j = select_fn(ents)
        dya_h, _ = M._budget_backward(members[j], caches[j], dlogs[j])
        dya = dya_t - gamma * dya_h
        _, grads_a = M._anonymizer_backward(a, cache_a, dya)
        return lt.value, ents, j, grads_a

    def target_grads(self, a, t, joint: bool):
        """L_T gradients; joint=True also returns the anonymizer's."""
        x, y_t = self._batch(self._rng_main, self.x_train, self.y_t_train)
        ya, cache_a = M._anonymizer_forward(a, x)
        logits_t, cache_t = M._target_forward(t, ya)
        lt, dlog_t = L.cross_entropy_grad(logits_t, y_t)
        dya_t, grads_t = M._target_backward(t, cache_t, dlog_t)
        if not joint:
            return lt.value, None, grads_t
        _, grads_a = M._anonymizer_backward(a, cache_a, dya_t)
        return lt.value, grads_a, grads_t

    def budget_losses(self, a, members) -> list[float]:
        """Per-member budget loss on the (frozen-anonymizer) gate subset."""
        x = self._anon_cache[self._gate_idx_train]
        y = self.y_b_train[self._gate_idx_train]
        out = []
        for b in members:
            logits, _ = M._budget_forward(b, x)
            out.append(L.cross_entropy(logits, y).value)
        return out

    def budget_ascent_grads(self, a, b):
        """(L_B, anonymizer grads of L_B) on one batch -- the K-Beam max step."""
        x, y_b = self._batch(self._rng_main, self.x_train, self.y_b_train)
        ya, cache_a = M._anonymizer_forward(a, x)
        logits_b, cache_b = M._budget_forward(b, ya)
        lb, dlog_b = self._budget_loss_grad(logits_b, y_b)
        dya_b, _ = M._budget_backward(b, cache_b, dlog_b)
        _, grads_a = M._anonymizer_backward(a, cache_a, dya_b)
        return lb.value, grads_a

    def refresh_cache(self, a) -> None:
        """Anonymize the whole training split once; valid while theta_A is frozen."""
        self._anon_cache = M.anonymize_batch(a, self.x_train)

    def member_descent_grads(self, b, slot: int):
        """(L_B, budget grads) on a batch of cached anonymized training clips."""
        rng = self._member_rng(slot)
        idx = rng.integers(0, len(self._anon_cache), size=self.cfg.batch_size)
        logits, cache = M._budget_forward(b, self._anon_cache[idx])
        lb, dlog = self._budget_loss_grad(logits, self.y_b_train[idx])
        _, grads_b = M._budget_backward(b, cache, dlog)
        return lb.value, grads_b

    # --- accuracy gates ------------------------------------------------------

    def _budget_accuracy(self, logits, y) -> float:
        if self.budget_mode == "single_class":
            return float(np.mean(np.argmax(logits, axis=1) == y))
        return float(np.mean((logits > 0).astype(np.int64) == y))

    def target_gate(self, a, t) -> tuple[float, float]:
        x = self.x_val[self._gate_idx_val]
        y = self.y_t_val[self._gate_idx_val]
        ya = M.anonymize_batch(a, x)
        logits = M.predict_target_batch(t, ya)
        return float(np.mean(np.argmax(logits, axis=1) == y)), L.cross_entropy(logits, y).value

    def budget_gate(self, b) -> tuple[float, float]:
        x = self._anon_cache[self._gate_idx_train]
        y = self.y_b_train[self._gate_idx_train]
        logits = M.predict_budget_batch(b, x)
        return self._budget_accuracy(logits, y), L.cross_entropy(logits, y).value


# ---------------------------------------------------------------------------
# trainer plumbing


def _gated_loop(gate_fn, step_fn, th: float, cfg: TrainConfig):
    """Run step_fn while the gate accuracy stays <= th, re-evaluating the gate
    every gate_every steps, never exceeding inner_cap steps."""
    steps = 0
    acc, loss = gate_fn()
    capped = False
    while acc <= th and steps < cfg.inner_cap:
        n = min(cfg.gate_every, cfg.inner_cap - steps)
        for _ in range(n):
            step_fn()
            steps += 1
        acc, loss = gate_fn()
    if acc <= th:
        capped = True
    return steps, acc, loss, capped


def _check_finite_loss(value: float, what: str, trace: TrainTrace) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}", trace=trace)


def _fit_member(engine, ensemble: EnsembleState, slot: int, cfg: TrainConfig, trace):
    """Gated descent of one budget member against the cached anonymized data.

    Touches only this member's parameters, optimizer state and RNG stream,
    so mapping it over the members is order-independent.
    """
    member, adam = ensemble.members[slot], ensemble.adam[slot]
    holder = {"m": member, "a": adam}

    def step():
        lb, gb = engine.member_descent_grads(holder["m"], slot)
        _check_finite_loss(lb, f"budget loss (member {slot})", trace)
        holder["m"], holder["a"] = _apply_step(holder["m"], gb, holder["a"], cfg.alpha_B, cfg)

    steps, acc, loss, capped = _gated_loop(
        lambda: engine.budget_gate(holder["m"]), step, cfg.th_B, cfg
    )
    return holder["m"], holder["a"], steps, acc, capped


def _replace_member(ensemble: EnsembleState, slot: int, member, adam) -> EnsembleState:
    members = list(ensemble.members)
    adams = list(ensemble.adam)
    members[slot], adams[slot] = member, adam
    return EnsembleState(
        members=tuple(members), adam=tuple(adams), used_seeds=ensemble.used_seeds
    )


def _budget_phase(engine, a, ensemble, cfg, trace, warnings):
    """Refresh the anonymized cache, then fit every member (Eq.-style per-member
    descent); returns the new ensemble plus per-member step counts/accuracies."""
    engine.refresh_cache(a)
    steps_b, acc_b = [], []
    for slot in range(len(ensemble.members)):
        member, adam, steps, acc, capped = _fit_member(engine, ensemble, slot, cfg, trace)
        ensemble = _replace_member(ensemble, slot, member, adam)
        steps_b.append(steps)
        acc_b.append(acc)
        if capped:
            warnings.append(f"budget gate capped at {cfg.inner_cap} steps (member {slot})")
    return ensemble, steps_b, acc_b


def _maybe_restart(engine, a, ensemble, it, cfg, restart_count, trace, warnings):
    restarted = False
    hashes: tuple[str, ...] = ()
    if cfg.restarting and it % cfg.rstrt_iter == 0:
        restart_count += 1
        ensemble = engine.restart_ensemble(ensemble, restart_count)
        restarted = True
        hashes = ensemble.hashes()
        if cfg.post_restart_warmup > 0:
            # Prose form of restarting: freeze the anonymizer and give the
            # fresh budget models a head start on the budget task.
            engine.refresh_cache(a)
            for slot in range(len(ensemble.members)):
                member, adam = ensemble.members[slot], ensemble.adam[slot]
                for _ in range(cfg.post_restart_warmup):
                    lb, gb = engine.member_descent_grads(member, slot)
                    _check_finite_loss(lb, f"warmup budget loss (member {slot})", trace)
                    member, adam = _apply_step(member, gb, adam, cfg.alpha_B, cfg)
                ensemble = _replace_member(ensemble, slot, member, adam)
    return ensemble, restarted, hashes, restart_count


def _emit(trace, sink, record, a, t, ensemble, cfg):
    trace.records.append(record)
    if sink is not None:
        sink.record(record)
        if record.iter % cfg.ckpt_every == 0:
            sink.checkpoint(record.iter, a, t, ensemble)


# ---------------------------------------------------------------------------
# the three schemes


def run_grl(engine, cfg: TrainConfig, sink=None):
    """GRL scheme against a single budget adversary."""
    trace = TrainTrace(method="grl")
    a = engine.init_anonymizer()
    t = engine.init_target()
    adam_a, adam_t = adam_init(a), adam_init(t)
    ensemble = None if cfg.disable_budget else engine.init_ensemble(1)
    restart_count = 0
    for it in range(1, cfg.max_iter + 1):
        warnings: list[str] = []
        restarted, hashes = False, ()
        budget_term = None
        if not cfg.disable_budget:
            ensemble, restarted, hashes, restart_count = _maybe_restart(
                engine, a, ensemble, it, cfg, restart_count, trace, warnings
            )
            t_hash = M.params_hash(t)
            lt, lb, grads_a = engine.grl_hybrid(a, t, ensemble.members[0], cfg.gamma)
            _check_finite_loss(lt + lb, "hybrid loss", trace)
            a, adam_a = _apply_step(a, grads_a, adam_a, cfg.alpha_A, cfg)
            budget_term = lb
            assert M.params_hash(t) == t_hash, "theta_T changed during the anonymizer step"

        t_holder = {"t": t, "adam": adam_t}

        def t_step():
            ltv, _, grads_t = engine.target_grads(a, t_holder["t"], joint=False)
            _check_finite_loss(ltv, "target loss", trace)
            t_holder["t"], t_holder["adam"] = _apply_step(
                t_holder["t"], grads_t, t_holder["adam"], cfg.alpha_T, cfg
            )

        b_hash = None if cfg.disable_budget else ensemble.hashes()
        steps_t, acc_t, loss_t, capped = _gated_loop(
            lambda: engine.target_gate(a, t_holder["t"]), t_step, cfg.th_T, cfg
        )
        t, adam_t = t_holder["t"], t_holder["adam"]
        if capped:
            warnings.append(f"target gate capped at {cfg.inner_cap} steps")
        if b_hash is not None:
            assert ensemble.hashes() == b_hash, "theta_B changed during target updates"

        steps_b, acc_b = [], []
        if not cfg.disable_budget:
            t_hash = M.params_hash(t)
            ensemble, steps_b, acc_b = _budget_phase(engine, a, ensemble, cfg, trace, warnings)
            assert M.params_hash(t) == t_hash, "theta_T changed during budget updates"

        record = TraceRecord(
            iter=it,
            restarted=restarted,
            selected=None,
            loss_T=loss_t,
            budget_term=budget_term,
            acc_T=acc_t,
            acc_B=tuple(acc_b),
            steps_T=steps_t,
            steps_B=tuple(steps_b),
            warnings=tuple(warnings),
            restart_hashes=hashes,
        )
        _emit(trace, sink, record, a, t, ensemble, cfg)
    budget = None if cfg.disable_budget else ensemble.members[0]
    return a, t, budget, trace


def run_kbeam(engine, cfg: TrainConfig, sink=None):
    """K-Beam scheme: ascend against the strongest of K tracked adversaries."""
    trace = TrainTrace(method="kbeam")
    a = engine.init_anonymizer()
    t = engine.init_target()
    adam_a, adam_t = adam_init(a), adam_init(t)
    ensemble = None if cfg.disable_budget else engine.init_ensemble(cfg.K)
    restart_count = 0
    for it in range(1, cfg.max_iter + 1):
        warnings: list[str] = []
        restarted, hashes = False, ()
        if not cfg.disable_budget:
            ensemble, restarted, hashes, restart_count = _maybe_restart(
                engine, a, ensemble, it, cfg, restart_count, trace, warnings
            )

        # L_T step: joint (anonymizer, target) descent until the gate opens.
        holder = {"a": a, "adam_a": adam_a, "t": t, "adam_t": adam_t}

        def joint_step():
            ltv, grads_a, grads_t = engine.target_grads(holder["a"], holder["t"], joint=True)
            _check_finite_loss(ltv, "target loss", trace)
            holder["a"], holder["adam_a"] = _apply_step(
                holder["a"], grads_a, holder["adam_a"], cfg.alpha_T, cfg
            )
            holder["t"], holder["adam_t"] = _apply_step(
                holder["t"], grads_t, holder["adam_t"], cfg.alpha_T, cfg
            )

        b_hash = None if cfg.disable_budget else ensemble.hashes()
        steps_t, acc_t, loss_t, capped = _gated_loop(
            lambda: engine.target_gate(holder["a"], holder["t"]), joint_step, cfg.th_T, cfg
        )
        a, adam_a, t, adam_t = holder["a"], holder["adam_a"], holder["t"], holder["adam_t"]
        if capped:
            warnings.append(f"target gate capped at {cfg.inner_cap} steps")
        if b_hash is not None:
            assert ensemble.hashes() == b_hash, "theta_B changed during target updates"

        selected = None
        budget_term = None
        steps_b, acc_b = [], []
        if not cfg.disable_budget:
            # Max step: pick the strongest beam, then ascend its budget loss.
            engine.refresh_cache(a)
            beam_losses = engine.budget_losses(a, ensemble.members)
            selected = select_strongest_beam(beam_losses)
            budget_term = beam_losses[selected]
            t_hash = M.params_hash(t)
            b_hash = ensemble.hashes()
            for _ in range(cfg.d_iter):
                lb, grads_a = engine.budget_ascent_grads(a, ensemble.members[selected])
                _check_finite_loss(lb, "budget loss (max step)", trace)
                a, adam_a = _apply_step(a, grads_a, adam_a, cfg.alpha_A, cfg, ascent=True)
            assert M.params_hash(t) == t_hash, "theta_T changed during the max step"
            assert ensemble.hashes() == b_hash, "theta_B changed during the max step"
            # Min step: every beam descends its own budget loss.
            ensemble, steps_b, acc_b = _budget_phase(engine, a, ensemble, cfg, trace, warnings)
            assert M.params_hash(t) == t_hash, "theta_T changed during budget updates"

        record = TraceRecord(
            iter=it,
            restarted=restarted,
            selected=selected,
            loss_T=loss_t,
            budget_term=budget_term,
            acc_T=acc_t,
            acc_B=tuple(acc_b),
            steps_T=steps_t,
            steps_B=tuple(steps_b),
            warnings=tuple(warnings),
            restart_hashes=hashes,
        )
        _emit(trace, sink, record, a, t, ensemble, cfg)
    return a, t, ensemble, trace


def run_entropy(engine, cfg: TrainConfig, sink=None):
    """Entropy scheme: the anonymizer maximizes the prediction entropy of the
    most confident ensemble member; all members keep training."""
    trace = TrainTrace(method="entropy")
    a = engine.init_anonymizer()
    t = engine.init_target()
    adam_a, adam_t = adam_init(a), adam_init(t)
    ensemble = None if cfg.disable_budget else engine.init_ensemble(cfg.M)
    restart_count = 0
    for it in range(1, cfg.max_iter + 1):
        warnings: list[str] = []
        restarted, hashes = False, ()
        selected = None
        budget_term = None
        if not cfg.disable_budget:
            ensemble, restarted, hashes, restart_count = _maybe_restart(
                engine, a, ensemble, it, cfg, restart_count, trace, warnings
            )
            t_hash = M.params_hash(t)
            b_hash = ensemble.hashes()
            lt, entropies, selected, grads_a = engine.entropy_hybrid(
                a, t, ensemble.members, cfg.gamma, select_min_entropy
            )
            _check_finite_loss(lt + sum(entropies), "hybrid loss", trace)
            a, adam_a = _apply_step(a, grads_a, adam_a, cfg.alpha_A, cfg)
            budget_term = entropies[selected]
            assert M.params_hash(t) == t_hash, "theta_T changed during the anonymizer step"
            assert ensemble.hashes() == b_hash, "theta_B changed during the anonymizer step"

        holder = {"a": a, "adam_a": adam_a, "t": t, "adam_t": adam_t}

        def joint_step():
            ltv, grads_a, grads_t = engine.target_grads(holder["a"], holder["t"], joint=True)
            _check_finite_loss(ltv, "target loss", trace)
            holder["a"], holder["adam_a"] = _apply_step(
                holder["a"], grads_a, holder["adam_a"], cfg.alpha_T, cfg
            )
            holder["t"], holder["adam_t"] = _apply_step(
                holder["t"], grads_t, holder["adam_t"], cfg.alpha_T, cfg
            )

        b_hash = None if cfg.disable_budget else ensemble.hashes()
        steps_t, acc_t, loss_t, capped = _gated_loop(
            lambda: engine.target_gate(holder["a"], holder["t"]), joint_step, cfg.th_T, cfg
        )
        a, adam_a, t, adam_t = holder["a"], holder["adam_a"], holder["t"], holder["adam_t"]
        if capped:
            warnings.append(f"target gate capped at {cfg.inner_cap} steps")
        if b_hash is not None:
            assert ensemble.hashes() == b_hash, "theta_B changed during target updates"

        steps_b, acc_b = [], []
        if not cfg.disable_budget:
            t_hash = M.params_hash(t)
            ensemble, steps_b, acc_b = _budget_phase(engine, a, ensemble, cfg, trace, warnings)
            assert M.params_hash(t) == t_hash, "theta_T changed during budget updates"

        record = TraceRecord(
            iter=it,
            restarted=restarted,
            selected=selected,
            loss_T=loss_t,
            budget_term=budget_term,
            acc_T=acc_t,
            acc_B=tuple(acc_b),
            steps_T=steps_t,
            steps_B=tuple(steps_b),
            warnings=tuple(warnings),
            restart_hashes=hashes,
        )
        _emit(trace, sink, record, a, t, ensemble, cfg)
    return a, t, ensemble, trace


# ---------------------------------------------------------------------------
# public entry points on datasets


def train_grl(data: DatasetSplits, cfg: TrainConfig, sink=None):
    if cfg.method != "grl":
        raise ValueError("cfg.method must be 'grl'")
    return run_grl(ConvEngine(data, cfg), cfg, sink)


def train_kbeam(data: DatasetSplits, cfg: TrainConfig, sink=None):
    if cfg.method != "kbeam":
        raise ValueError("cfg.method must be 'kbeam'")
    return run_kbeam(ConvEngine(data, cfg), cfg, sink)


def train_entropy(data: DatasetSplits, cfg: TrainConfig, sink=None):
    if cfg.method != "entropy":
        raise ValueError("cfg.method must be 'entropy'")
    return run_entropy(ConvEngine(data, cfg), cfg, sink)
