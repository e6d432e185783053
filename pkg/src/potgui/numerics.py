"""Softmax / cross-entropy primitives, a finite-difference oracle and Adam.

Logit tensors have the class axis last, e.g. ``(samples, pixels, classes)``;
label tensors carry the same leading shape with integer class ids.
Losses are averaged over every scored element (samples x pixels).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError


def _check_logits(logits):
    logits = np.asarray(logits)
    if logits.ndim < 1 or logits.shape[-1] < 2:
        raise InvalidInputError(f"need at least 2 classes, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits contain NaN or Inf")
    return logits


def _check_pair(labels, logits):
    logits = _check_logits(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise InvalidInputError(
            f"label shape {labels.shape} does not match logits {logits.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise InvalidInputError("label id out of range")
    return labels, logits


def one_hot(labels, num_classes, dtype=np.float64):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidInputError("label id out of range")
    return np.eye(num_classes, dtype=dtype)[labels]


def log_softmax(logits):
    logits = _check_logits(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    logits = _check_logits(logits)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _picked(labels, values):
    return np.take_along_axis(values, labels[..., None].astype(np.intp), axis=-1)[..., 0]


def cross_entropy(labels, logits):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels, logits = _check_pair(labels, logits)
    if labels.size == 0:
        raise InvalidInputError("empty input")
    loss = -_picked(labels, log_softmax(logits)).sum() / labels.size
    # log-softmax of the label entry is <= 0; guard the -0.0 / rounding case
    return max(float(loss), 0.0)


def ce_logit_gradient(labels, logits):
    """Gradient of :func:`cross_entropy` w.r.t. the logits: ``(P_X - P_Y) / N``."""
    labels, logits = _check_pair(labels, logits)
    probs = softmax(logits)
    return _subtract_target(probs, labels) / labels.size


def _subtract_target(probs, labels):
    out = probs.copy()
    np.put_along_axis(
        out,
        labels[..., None].astype(np.intp),
        _picked(labels, probs)[..., None] - 1.0,
        axis=-1,
    )
    return out


def finite_diff_gradient(loss_fn, point, epsilon=1e-6):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        up = loss_fn(x)
        flat[i] = orig - epsilon
        down = loss_fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * epsilon)
    return grad


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    @classmethod
    def fresh(cls, like, hyper=None):
        like = np.asarray(like)
        return cls(np.zeros_like(like, dtype=np.float64),
                   np.zeros_like(like, dtype=np.float64),
                   0, hyper or AdamHyper())


def adam_update(params, grads, state):
    """One bias-corrected Adam step; weight decay is added to the gradient (L2).

    Returns ``(new_params, new_state)``; the inputs are not modified.
    """
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape or params.shape != state.first_moment.shape:
        raise InvalidInputError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, "
            f"state {state.first_moment.shape}"
        )
    h = state.hyper
    if h.weight_decay:
        grads = grads + h.weight_decay * params
    t = state.step_count + 1
    m = h.beta1 * state.first_moment + (1.0 - h.beta1) * grads
    v = h.beta2 * state.second_moment + (1.0 - h.beta2) * grads * grads
    m_hat = m / (1.0 - h.beta1 ** t)
    v_hat = v / (1.0 - h.beta2 ** t)
    new_params = params - h.lr * m_hat / (np.sqrt(v_hat) + h.eps)
    return new_params, AdamState(m, v, t, h)
