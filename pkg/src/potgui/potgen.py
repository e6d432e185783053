"""K-layer unrolled gradient descent on classifier logits.

Each layer applies ``O_k = O_{k-1} - eta_k * alpha_k * dCE/dO(O_{k-1})`` and the
whole chain is differentiable w.r.t. the initial logits and every step scalar.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DivergenceError, InvalidInputError
from .numerics import _check_pair, _subtract_target

TWO_PARAM = "two_param"
ONE_PARAM = "one_param"
MODES = (TWO_PARAM, ONE_PARAM)


@dataclass
class _Tape:
    labels: np.ndarray
    alpha: np.ndarray
    eta: np.ndarray
    logits: list  # O_0 .. O_{K-1}
    probs: list  # softmax of the above


@dataclass
class PotStack:
    """Learnable per-layer step scalars.

    In ``one_param`` mode ``alpha`` holds gamma_k and ``eta`` is pinned to 1.
    """

    alpha: np.ndarray
    eta: np.ndarray
    mode: str = TWO_PARAM
    tape: _Tape | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        self.eta = np.asarray(self.eta, dtype=np.float64).reshape(-1)
        if self.alpha.shape != self.eta.shape:
            raise InvalidInputError("alpha and eta must have the same length")
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown parameter mode {self.mode!r}")

    @property
    def K(self):
        return self.alpha.size

    @property
    def steps(self):
        return self.alpha * self.eta

    @property
    def tape_length(self):
        return 0 if self.tape is None else len(self.tape.logits)

    def with_params(self, alpha, eta=None):
        """Copy with new scalars; the tape is not carried over."""
        if eta is None or self.mode == ONE_PARAM:
            eta = self.eta
        return PotStack(np.array(alpha, dtype=np.float64),
                        np.array(eta, dtype=np.float64), self.mode)


@dataclass
class PotOutput:
    guided_logits: np.ndarray
    per_layer_loss: list


def init_stack(K, mode=TWO_PARAM, alpha0=1.0, eta0=1.0):
    if K < 0:
        raise InvalidInputError(f"K must be >= 0, got {K}")
    if mode == ONE_PARAM:
        eta0 = 1.0
    return PotStack(np.full(K, float(alpha0)), np.full(K, float(eta0)), mode)


def _layer_stats(labels, logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    picked = np.take_along_axis(shifted, labels[..., None].astype(np.intp), axis=-1)
    loss = float((np.log(z) - picked).sum()) / labels.size
    return probs, max(loss, 0.0)


def pot_forward(initial_logits, labels, stack, record_tape=False):
    """Run the unroll; ``per_layer_loss[k]`` is the cross-entropy at ``O_k``."""
    labels, logits = _check_pair(labels, initial_logits)
    if not (np.all(np.isfinite(stack.alpha)) and np.all(np.isfinite(stack.eta))):
        raise InvalidInputError("step parameters must be finite")
    n = labels.size
    steps = stack.steps
    tape_logits, tape_probs, losses = [], [], []
    current = logits
    for k in range(stack.K):
        probs, loss = _layer_stats(labels, current)
        losses.append(loss)
        if record_tape:
            tape_logits.append(current)
            tape_probs.append(probs)
        grad = _subtract_target(probs, labels) / n
        current = current - steps[k] * grad
        if not np.all(np.isfinite(current)):
            stack.tape = None
            raise DivergenceError(k + 1)
    losses.append(_layer_stats(labels, current)[1])
    if record_tape:
        stack.tape = _Tape(labels, stack.alpha.copy(), stack.eta.copy(),
                           tape_logits, tape_probs)
    return PotOutput(current, losses)


def pot_backward(stack, labels, upstream):
    """Reverse-mode pass through the recorded unroll.

    Returns ``(grad_initial_logits, grad_alpha, grad_eta)``. In ``one_param``
    mode ``grad_alpha`` is the gradient w.r.t. gamma_k and ``grad_eta`` is zero.
    The tape is consumed.
    """
    tape = stack.tape
    if tape is None:
        raise ContractError("pot_backward called without a recorded forward tape")
    labels = np.asarray(labels)
    if (labels.shape != tape.labels.shape or not np.array_equal(labels, tape.labels)
            or not np.array_equal(stack.alpha, tape.alpha)
            or not np.array_equal(stack.eta, tape.eta)):
        stack.tape = None
        raise ContractError("stale tape: labels or step parameters changed since forward")
    stack.tape = None

    bar = np.array(upstream, dtype=np.float64)
    if tape.logits and bar.shape != tape.logits[0].shape:
        raise InvalidInputError("upstream gradient has the wrong shape")
    n = labels.size
    steps = tape.alpha * tape.eta
    grad_step = np.zeros(len(tape.logits))
    for k in range(len(tape.logits) - 1, -1, -1):
        probs = tape.probs[k]
        g = _subtract_target(probs, labels) / n
        grad_step[k] = -float(np.vdot(bar, g))
        # softmax Jacobian is symmetric: J v = P*v - P*(P.v)
        jv = probs * (bar - (probs * bar).sum(axis=-1, keepdims=True)) / n
        bar = bar - steps[k] * jv
    if stack.mode == ONE_PARAM:
        return bar, grad_step, np.zeros_like(grad_step)
    return bar, grad_step * tape.eta, grad_step * tape.alpha
