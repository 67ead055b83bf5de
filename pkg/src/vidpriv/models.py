"""The three network roles: frame-level anonymizer, clip-level target
classifier, and per-frame budget (attacker) classifier.

Architectures are desk-scale:

* anonymizer -- residual stack of 2D convolutions applied independently to
  every frame, with an affine + hard-sigmoid head that bounds the output to
  [0, 1] and admits an exact identity configuration;
* target -- 3D-convolutional clip classifier (spatiotemporal kernels, so
  motion is visible to it);
* budget -- 2D-convolutional frame classifier whose per-frame logits are
  averaged over time to produce clip logits. Width/depth variants form the
  attacker family, split into disjoint training and evaluation grids.

Parameter sets are immutable values: every update builds a new one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn

__all__ = [
    "ArchSpec",
    "ParameterSet",
    "BUDGET_WIDTHS",
    "TRAIN_GRID_WIDTHS",
    "EVAL_GRID_WIDTHS",
    "anonymizer_arch",
    "target_arch",
    "budget_base_arch",
    "budget_family",
    "family_grids",
    "init_params",
    "params_hash",
    "params_astype",
    "anonymize",
    "anonymize_batch",
    "predict_target",
    "predict_target_batch",
    "predict_budget",
    "predict_budget_batch",
]

ROLES = ("anonymizer", "target", "budget")

BUDGET_WIDTHS = (0.25, 0.5, 0.75, 1.0, 1.25, 1.5)
# Disjoint halves of the width axis: attackers drawn for evaluation never
# share a spec with the ensemble trained against.
TRAIN_GRID_WIDTHS = (1.25, 0.75, 0.25)
EVAL_GRID_WIDTHS = (1.0, 1.5, 0.5)

_ANON_BASE_CH = 8
_TARGET_BASE_CH = (8, 16, 16, 16)
_BUDGET_BASE_CH = 8

# Affine head values that make the hard-sigmoid an exact pass-through on
# [0, 1]: hardsig(5x - 2.5) = clip(x, 0, 1) = x.
HEAD_GAIN_INIT = 1.0 / nn.HS_SLOPE
HEAD_BIAS_INIT = -0.5 / nn.HS_SLOPE
RES_SCALE_INIT = 0.1


@dataclass(frozen=True)
class ArchSpec:
    """Architecture tag: role plus the scalars that fix all weight shapes."""

    role: str
    depth: int
    width_multiplier: float
    num_outputs: int
    in_channels: int = 3

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be > 0")
        if self.num_outputs < 1:
            raise ValueError("num_outputs must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.role == "budget" and self.width_multiplier not in BUDGET_WIDTHS:
            raise ValueError(
                f"budget width_multiplier must be one of {BUDGET_WIDTHS}"
            )
        if self.role == "anonymizer" and self.num_outputs != self.in_channels:
            raise ValueError("anonymizer must preserve the channel count")


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Immutable named weights for one network plus its init seed."""

    arch: ArchSpec
    weights: dict[str, np.ndarray] = field(repr=False)
    seed: int = 0

    def __post_init__(self):
        for name, arr in self.weights.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite weights in {name!r}")
            arr.flags.writeable = False

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype


def anonymizer_arch(in_channels: int = 3, width: float = 1.0, depth: int = 3) -> ArchSpec:
    return ArchSpec("anonymizer", depth, width, in_channels, in_channels)


def target_arch(num_classes: int, in_channels: int = 3, width: float = 1.0, depth: int = 4) -> ArchSpec:
    return ArchSpec("target", depth, width, num_classes, in_channels)


def budget_base_arch(num_outputs: int, in_channels: int = 3, depth: int = 3) -> ArchSpec:
    return ArchSpec("budget", depth, 1.0, num_outputs, in_channels)


def family_grids(base: ArchSpec) -> tuple[list[ArchSpec], list[ArchSpec]]:
    """Full (training, evaluation) attacker grids around ``base``.

    Depth varies around the base depth and widths come from the two disjoint
    halves of the multiplier set, so the grids never intersect.
    """
    depths = (base.depth, base.depth - 1, base.depth + 1)
    grids = []
    for widths in (TRAIN_GRID_WIDTHS, EVAL_GRID_WIDTHS):
        grids.append(
            [
                replace(base, depth=d, width_multiplier=w)
                for d in depths
                for w in widths
            ]
        )
    return grids[0], grids[1]


def budget_family(count: int, base: ArchSpec, split: str = "train") -> list[ArchSpec]:
    """First ``count`` attacker specs from the requested half of the grid."""
    if count < 1:
        raise ValueError("count must be >= 1")
    train, eval_ = family_grids(base)
    grid = {"train": train, "eval": eval_}.get(split)
    if grid is None:
        raise ValueError(f"split must be 'train' or 'eval', got {split!r}")
    if count > len(grid):
        raise ValueError(f"count {count} exceeds grid size {len(grid)}")
    return grid[:count]


def _anon_hidden(arch: ArchSpec) -> int:
    return max(1, round(_ANON_BASE_CH * arch.width_multiplier))


def _target_channels(arch: ArchSpec) -> list[int]:
    base = list(_TARGET_BASE_CH) + [_TARGET_BASE_CH[-1]] * max(0, arch.depth - len(_TARGET_BASE_CH))
    return [max(1, round(c * arch.width_multiplier)) for c in base[: arch.depth]]


def _target_strides(arch: ArchSpec) -> list[tuple]:
    pattern = [(1, 2, 2), (2, 2, 2), (2, 2, 2)]
    return (pattern + [(1, 1, 1)] * arch.depth)[: arch.depth]


def _budget_channels(arch: ArchSpec) -> int:
    return max(1, round(_BUDGET_BASE_CH * arch.width_multiplier))


def _budget_strides(arch: ArchSpec) -> list[int]:
    return ([2, 2, 2] + [1] * arch.depth)[: arch.depth]


def _layer_plan(arch: ArchSpec) -> list[tuple]:
    """(name, kind, kernel_shape, fan_in) tuples in init/forward order."""
    plan = []
    if arch.role == "anonymizer":
        h = _anon_hidden(arch)
        chans = [arch.in_channels] + [h] * (arch.depth - 1) + [arch.in_channels]
        for i in range(arch.depth):
            cin, cout = chans[i], chans[i + 1]
            plan.append((f"conv{i}", "conv2d", (3, 3, cin, cout), 9 * cin))
        plan.append(("res", "scale", (arch.in_channels,), 0))
        plan.append(("head", "affine", (arch.in_channels,), 0))
    elif arch.role == "target":
        chans = [arch.in_channels] + _target_channels(arch)
        for i in range(arch.depth):
            cin, cout = chans[i], chans[i + 1]
            plan.append((f"conv{i}", "conv3d", (3, 3, 3, cin, cout), 27 * cin))
        plan.append(("fc", "dense", (chans[-1], arch.num_outputs), chans[-1]))
    else:
        ch = _budget_channels(arch)
        chans = [arch.in_channels] + [ch] * arch.depth
        for i in range(arch.depth):
            cin, cout = chans[i], chans[i + 1]
            plan.append((f"conv{i}", "conv2d", (3, 3, cin, cout), 9 * cin))
        plan.append(("fc", "dense", (ch, arch.num_outputs), ch))
    return plan


def init_params(arch: ArchSpec, seed: int, dtype=np.float32) -> ParameterSet:
    """Fan-scaled random weights, deterministic in (arch, seed)."""
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for name, kind, shape, fan_in in _layer_plan(arch):
        if kind == "affine":
            weights[f"{name}/gain"] = np.full(shape, HEAD_GAIN_INIT, dtype=dtype)
            weights[f"{name}/bias"] = np.full(shape, HEAD_BIAS_INIT, dtype=dtype)
        elif kind == "scale":
            # Small residual gate: the anonymizer starts near the identity
            # (saturation-free head) while the conv stack keeps its fan-scaled
            # init and still receives gradient.
            weights[f"{name}/scale"] = np.full(shape, RES_SCALE_INIT, dtype=dtype)
        else:
            weights[f"{name}/w"] = nn.he_normal(rng, shape, fan_in, dtype)
            weights[f"{name}/b"] = np.zeros(shape[-1], dtype=dtype)
    return ParameterSet(arch=arch, weights=weights, seed=seed)


def params_hash(theta: ParameterSet) -> str:
    h = hashlib.sha256()
    h.update(repr(theta.arch).encode())
    for name, arr in theta.weights.items():
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def params_astype(theta: ParameterSet, dtype) -> ParameterSet:
    return ParameterSet(
        arch=theta.arch,
        weights={k: v.astype(dtype) for k, v in theta.weights.items()},
        seed=theta.seed,
    )


def _check_clip_batch(theta: ParameterSet, x: np.ndarray, role: str) -> None:
    if theta.arch.role != role:
        raise ValueError(f"expected a {role} ParameterSet, got {theta.arch.role}")
    if x.ndim != 5:
        raise ValueError(f"expected [B, T, W, H, C] input, got shape {x.shape}")
    if x.shape[-1] != theta.arch.in_channels:
        raise ValueError(
            f"channel mismatch: clip has {x.shape[-1]}, arch expects {theta.arch.in_channels}"
        )
    if x.dtype != theta.dtype:
        raise ValueError(f"dtype mismatch: clip {x.dtype}, weights {theta.dtype}")


# ---------------------------------------------------------------------------
# anonymizer


def _anonymizer_forward(theta: ParameterSet, x: np.ndarray):
    """x: [B, T, W, H, C] -> same shape, values in [0, 1]."""
    b, t = x.shape[:2]
    xf = x.reshape((b * t,) + x.shape[2:])
    w = theta.weights
    caches = []
    h = xf
    for i in range(theta.arch.depth):
        h, c = nn.conv2d_forward(h, w[f"conv{i}/w"], w[f"conv{i}/b"], stride=1)
        caches.append(c)
        if i < theta.arch.depth - 1:
            h, cr = nn.relu_forward(h)
            caches.append(cr)
    # Gated residual skip; the pass-through configuration (zero convs) stays
    # reachable and the default init sits close to it.
    pre = w["res/scale"] * h + xf
    a = w["head/gain"] * pre + w["head/bias"]
    y, ch = nn.hardsig_forward(a)
    cache = (x.shape, caches, h, pre, ch)
    return y.reshape(x.shape), cache


def _anonymizer_backward(theta: ParameterSet, cache, dy: np.ndarray):
    x_shape, caches, h, pre, ch = cache
    b, t = x_shape[:2]
    dyf = dy.reshape((b * t,) + x_shape[2:])
    w = theta.weights
    grads: dict[str, np.ndarray] = {}
    da = nn.hardsig_backward(ch, dyf)
    grads["head/gain"] = (da * pre).sum(axis=(0, 1, 2))
    grads["head/bias"] = da.sum(axis=(0, 1, 2))
    dpre = da * w["head/gain"]
    grads["res/scale"] = (dpre * h).sum(axis=(0, 1, 2))
    dx = dpre.copy()  # residual branch
    dh = dpre * w["res/scale"]
    ci = len(caches) - 1
    for i in reversed(range(theta.arch.depth)):
        if i < theta.arch.depth - 1:
            dh = nn.relu_backward(caches[ci], dh)
            ci -= 1
        dh, dwi, dbi = nn.conv2d_backward(caches[ci], dh)
        ci -= 1
        grads[f"conv{i}/w"] = dwi
        grads[f"conv{i}/b"] = dbi
    dx += dh
    return dx.reshape(x_shape), grads


def anonymize_batch(theta: ParameterSet, x: np.ndarray) -> np.ndarray:
    _check_clip_batch(theta, x, "anonymizer")
    y, _ = _anonymizer_forward(theta, x)
    return y


def anonymize(theta: ParameterSet, clip: np.ndarray) -> np.ndarray:
    """Frame-level anonymization; output shape equals input shape."""
    if clip.ndim != 4:
        raise ValueError(f"expected a [T, W, H, C] clip, got shape {clip.shape}")
    return anonymize_batch(theta, clip[None])[0]


# ---------------------------------------------------------------------------
# target


def _target_forward(theta: ParameterSet, x: np.ndarray):
    w = theta.weights
    strides = _target_strides(theta.arch)
    caches = []
    h = x
    for i in range(theta.arch.depth):
        h, c = nn.conv3d_forward(h, w[f"conv{i}/w"], w[f"conv{i}/b"], stride=strides[i])
        caches.append(c)
        h, cr = nn.relu_forward(h)
        caches.append(cr)
    p, cp = nn.mean_pool_forward(h, (1, 2, 3))
    logits, cd = nn.dense_forward(p, w["fc/w"], w["fc/b"])
    return logits, (caches, cp, cd)


def _target_backward(theta: ParameterSet, cache, dlogits: np.ndarray):
    caches, cp, cd = cache
    grads: dict[str, np.ndarray] = {}
    dp, grads["fc/w"], grads["fc/b"] = nn.dense_backward(cd, dlogits)
    dh = nn.mean_pool_backward(cp, dp)
    ci = len(caches) - 1
    for i in reversed(range(theta.arch.depth)):
        dh = nn.relu_backward(caches[ci], dh)
        ci -= 1
        dh, dwi, dbi = nn.conv3d_backward(caches[ci], dh)
        ci -= 1
        grads[f"conv{i}/w"] = dwi
        grads[f"conv{i}/b"] = dbi
    return dh, grads


def predict_target_batch(theta: ParameterSet, x: np.ndarray) -> np.ndarray:
    _check_clip_batch(theta, x, "target")
    logits, _ = _target_forward(theta, x)
    return logits


def predict_target(theta: ParameterSet, clip: np.ndarray) -> np.ndarray:
    """Clip logits from the spatiotemporal classifier."""
    if clip.ndim != 4:
        raise ValueError(f"expected a [T, W, H, C] clip, got shape {clip.shape}")
    return predict_target_batch(theta, clip[None])[0]


# ---------------------------------------------------------------------------
# budget


def _budget_forward(theta: ParameterSet, x: np.ndarray):
    b, t = x.shape[:2]
    xf = x.reshape((b * t,) + x.shape[2:])
    w = theta.weights
    strides = _budget_strides(theta.arch)
    caches = []
    h = xf
    for i in range(theta.arch.depth):
        h, c = nn.conv2d_forward(h, w[f"conv{i}/w"], w[f"conv{i}/b"], stride=strides[i])
        caches.append(c)
        h, cr = nn.relu_forward(h)
        caches.append(cr)
    p, cp = nn.mean_pool_forward(h, (1, 2))
    frame_logits, cd = nn.dense_forward(p, w["fc/w"], w["fc/b"])
    per_frame = frame_logits.reshape(b, t, -1)
    # Temporal aggregation is a plain mean of per-frame logits (pre-softmax).
    # Accumulating in float64 keeps the mean invariant to frame order.
    logits = per_frame.mean(axis=1, dtype=np.float64).astype(x.dtype)
    return logits, (x.shape, caches, cp, cd)


def _budget_backward(theta: ParameterSet, cache, dlogits: np.ndarray):
    x_shape, caches, cp, cd = cache
    b, t = x_shape[:2]
    grads: dict[str, np.ndarray] = {}
    dframe = np.repeat(dlogits[:, None, :] / t, t, axis=1).reshape(b * t, -1)
    dframe = dframe.astype(dlogits.dtype, copy=False)
    dp, grads["fc/w"], grads["fc/b"] = nn.dense_backward(cd, dframe)
    dh = nn.mean_pool_backward(cp, dp)
    ci = len(caches) - 1
    for i in reversed(range(theta.arch.depth)):
        dh = nn.relu_backward(caches[ci], dh)
        ci -= 1
        dh, dwi, dbi = nn.conv2d_backward(caches[ci], dh)
        ci -= 1
        grads[f"conv{i}/w"] = dwi
        grads[f"conv{i}/b"] = dbi
    return dh.reshape(x_shape), grads


def predict_budget_batch(theta: ParameterSet, x: np.ndarray) -> np.ndarray:
    _check_clip_batch(theta, x, "budget")
    logits, _ = _budget_forward(theta, x)
    return logits


def predict_budget(theta: ParameterSet, clip: np.ndarray) -> np.ndarray:
    """Clip logits: mean over frames of the per-frame classifier logits."""
    if clip.ndim != 4:
        raise ValueError(f"expected a [T, W, H, C] clip, got shape {clip.shape}")
    return predict_budget_batch(theta, clip[None])[0]
