"""Training objectives for the three-party game.

Four primitives: the target cross-entropy, the budget cross-entropy, its
negation (the adversarial budget cost), and the prediction entropy used by
the entropy-maximization scheme. Each comes in a value-only and a
value-plus-gradient flavour; gradients are with respect to the logits, with
the batch mean baked in.

Single-class labels are integer class ids; multi-attribute labels are
binary vectors matching the logits' shape, and the per-attribute binary
cross-entropies / entropies are summed per sample. Natural log throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossValue",
    "cross_entropy",
    "cross_entropy_grad",
    "negative_budget_xent",
    "negative_budget_xent_grad",
    "prediction_entropy",
    "prediction_entropy_grad",
    "hybrid_loss",
]


@dataclass(frozen=True)
class LossValue:
    value: float
    batch_size: int


def _as_logit_batch(logits) -> np.ndarray:
    z = np.asarray(logits)
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2:
        raise ValueError(f"logits must be a vector or [batch, outputs], got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    return z


def _is_multi_attribute(z: np.ndarray, label) -> bool:
    """Binary label matrices (or a vector matching a single sample's logits)
    select the multi-attribute path; integer class-id batches win ties."""
    y = np.asarray(label)
    if y.ndim == 2:
        return True
    if y.ndim == 1 and y.shape[0] == z.shape[0]:
        return False
    return y.ndim == 1 and z.shape[0] == 1 and y.shape[0] == z.shape[1]


def _class_labels(z: np.ndarray, label) -> np.ndarray:
    y = np.asarray(label)
    if y.ndim == 0:
        y = y[None]
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise ValueError(f"label shape {y.shape} does not match batch {z.shape[0]}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("class labels must be integers")
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise ValueError(f"label out of range [0, {z.shape[1]})")
    return y


def _binary_labels(z: np.ndarray, label) -> np.ndarray:
    y = np.asarray(label)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape != z.shape:
        raise ValueError(f"binary label shape {y.shape} does not match logits {z.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("binary labels must be 0/1")
    return y.astype(z.dtype)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z), stable for large |z|
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def cross_entropy(logits, label) -> LossValue:
    """Mean cross-entropy; multi-attribute labels sum the per-attribute BCEs."""
    z = _as_logit_batch(logits)
    if _is_multi_attribute(z, label):
        y = _binary_labels(z, label)
        per = (_softplus(z) - z * y).sum(axis=1)
    else:
        y = _class_labels(z, label)
        per = -_log_softmax(z)[np.arange(z.shape[0]), y]
    return LossValue(float(per.mean()), z.shape[0])


def cross_entropy_grad(logits, label) -> tuple[LossValue, np.ndarray]:
    z = _as_logit_batch(logits)
    n = z.shape[0]
    if _is_multi_attribute(z, label):
        y = _binary_labels(z, label)
        per = (_softplus(z) - z * y).sum(axis=1)
        dz = (_sigmoid(z) - y) / n
    else:
        y = _class_labels(z, label)
        logp = _log_softmax(z)
        per = -logp[np.arange(n), y]
        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
        dz /= n
    return LossValue(float(per.mean()), n), dz.astype(z.dtype, copy=False)


def negative_budget_xent(logits, label) -> LossValue:
    """The adversarial budget cost: exactly minus the budget cross-entropy."""
    ce = cross_entropy(logits, label)
    return LossValue(-ce.value, ce.batch_size)


def negative_budget_xent_grad(logits, label) -> tuple[LossValue, np.ndarray]:
    ce, dz = cross_entropy_grad(logits, label)
    return LossValue(-ce.value, ce.batch_size), -dz


def prediction_entropy(logits, mode: str = "softmax") -> LossValue:
    """Mean prediction entropy; 'binary' mode sums per-attribute binary entropies."""
    z = _as_logit_batch(logits)
    if mode == "softmax":
        logp = _log_softmax(z)
        p = np.exp(logp)
        per = -(p * logp).sum(axis=1)
    elif mode == "binary":
        s = _sigmoid(z)
        # -s ln s - (1-s) ln(1-s) via softplus identities, stable at |z| >> 0
        per = (s * _softplus(-z) + (1.0 - s) * _softplus(z)).sum(axis=1)
    else:
        raise ValueError(f"unknown entropy mode {mode!r}")
    return LossValue(float(per.mean()), z.shape[0])


def prediction_entropy_grad(logits, mode: str = "softmax") -> tuple[LossValue, np.ndarray]:
    z = _as_logit_batch(logits)
    n = z.shape[0]
    if mode == "softmax":
        logp = _log_softmax(z)
        p = np.exp(logp)
        per = -(p * logp).sum(axis=1)
        dz = -p * (logp + per[:, None]) / n
    elif mode == "binary":
        s = _sigmoid(z)
        per = (s * _softplus(-z) + (1.0 - s) * _softplus(z)).sum(axis=1)
        dz = -z * s * (1.0 - s) / n
    else:
        raise ValueError(f"unknown entropy mode {mode!r}")
    return LossValue(float(per.mean()), n), dz.astype(z.dtype, copy=False)


def hybrid_loss(loss_t: LossValue, budget_term: LossValue, gamma: float) -> LossValue:
    """Scalar objective the anonymizer descends: L_T plus gamma times the budget term."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return LossValue(loss_t.value + gamma * budget_term.value, loss_t.batch_size)
