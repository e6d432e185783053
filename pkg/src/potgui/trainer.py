"""Training loops: plain cross-entropy baseline and trajectory-guided training.

Guided training feeds the head's logits through the unroll in :mod:`potgen`,
blends the result back with weight ``sigma`` and minimises cross-entropy on the
blend, updating both the head and the unroll's step scalars.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import LAYER_MODES, select_layers
from .errors import DivergenceError, InvalidInputError
from .head import head_backward, head_forward, init_head
from .metrics import MetricsReport, confusion, predict, report
from .numerics import AdamHyper, AdamState, adam_update, ce_logit_gradient, cross_entropy
from .potgen import MODES, ONE_PARAM, init_stack, pot_backward, pot_forward

RECORD_COLUMNS = ("epoch", "train_loss", "miou", "mf1", "mprec", "mrec",
                  "miou_guided", "alpha_norm", "eta_norm")

ABLATION_AXES = {
    "K_sweep": "K",
    "sigma_sweep": "sigma",
    "param_mode": "param_mode",
    "layer_mode": "layer_mode",
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    sigma: float = 0.5
    K: int = 10
    param_mode: str = "two_param"
    seed: int = 0
    eval_every: int = 1
    layer_mode: str = "Middle_4"
    hidden: tuple = (64,)
    eval_fraction: float = 0.2
    alpha0: float = 1.0
    eta0: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise InvalidInputError(f"sigma must lie in [0, 1], got {self.sigma}")
        if self.K < 0:
            raise InvalidInputError(f"K must be >= 0, got {self.K}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.eval_every < 1:
            raise InvalidInputError("epochs must be >= 0 and eval_every >= 1")
        if self.param_mode not in MODES:
            raise InvalidInputError(f"unknown parameter mode {self.param_mode!r}")
        if self.layer_mode not in LAYER_MODES:
            raise InvalidInputError(f"unknown layer mode {self.layer_mode!r}")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise InvalidInputError("eval_fraction must lie in [0, 1)")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def hyper(self):
        return AdamHyper(self.lr, self.beta1, self.beta2, 1e-8, self.weight_decay)

    def as_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval: MetricsReport | None
    guided: MetricsReport | None
    alpha: np.ndarray
    eta: np.ndarray


@dataclass
class TrainRecord:
    config: TrainConfig
    with_potgui: bool
    head: object
    stack: object
    epochs: list = field(default_factory=list)

    def mious(self):
        return [e.eval.miou if e.eval is not None else float("nan") for e in self.epochs]

    def best_miou(self, within=None):
        vals = [v for v in self.mious()[:within] if not np.isnan(v)]
        return max(vals) if vals else float("nan")

    def epochs_to_reach(self, threshold):
        """First (1-based) epoch whose eval mIoU is >= threshold, else None."""
        for e in self.epochs:
            if e.eval is not None and e.eval.miou >= threshold:
                return e.epoch
        return None

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for e in self.epochs:
            ev = e.eval
            row = [e.epoch, repr(e.train_loss)]
            row += [repr(x) for x in (ev.miou, ev.mf1, ev.mprec, ev.mrec)] if ev else [""] * 4
            row.append(repr(e.guided.miou) if e.guided else "")
            row += [repr(float(np.linalg.norm(e.alpha))), repr(float(np.linalg.norm(e.eta)))]
            writer.writerow(row)
        return buf.getvalue()


def mix(model_logits, pot_logits, sigma):
    if not 0.0 <= sigma <= 1.0:
        raise InvalidInputError(f"sigma must lie in [0, 1], got {sigma}")
    model_logits = np.asarray(model_logits)
    pot_logits = np.asarray(pot_logits)
    if model_logits.shape != pot_logits.shape:
        raise InvalidInputError("model and guided logits differ in shape")
    return sigma * model_logits + (1.0 - sigma) * pot_logits


def init_optim(head, stack, hyper):
    return {
        "head": [AdamState.fresh(a, hyper) for a in head.arrays()],
        "alpha": AdamState.fresh(stack.alpha, hyper),
        "eta": AdamState.fresh(stack.eta, hyper),
    }


def batch_gradients(features, labels, head, stack, sigma, with_potgui=True):
    """Loss and gradients for one batch without applying any update.

    Returns ``(loss, head_grads, grad_alpha, grad_eta)``.
    """
    logits, cache = head_forward(features, head, return_cache=True)
    if with_potgui:
        guided = pot_forward(logits, labels, stack, record_tape=True).guided_logits
        mixed = mix(logits, guided, sigma)
        loss = cross_entropy(labels, mixed)
        upstream = ce_logit_gradient(labels, mixed)
        g_model, g_alpha, g_eta = pot_backward(stack, labels, (1.0 - sigma) * upstream)
        g_logits = sigma * upstream + g_model
    else:
        loss = cross_entropy(labels, logits)
        g_logits = ce_logit_gradient(labels, logits)
        g_alpha = g_eta = np.zeros(stack.K)
    head_grads, _ = head_backward(features, head, g_logits, cache)
    return loss, head_grads, g_alpha, g_eta


def train_step(features, labels, head, stack, states, config, with_potgui=True,
               batch_index=None):
    """One optimisation step; returns ``(head, stack, states, loss)``."""
    try:
        loss, grads, g_alpha, g_eta = batch_gradients(
            features, labels, head, stack, config.sigma, with_potgui)
    except DivergenceError as err:
        raise DivergenceError(err.layer, batch_index) from None

    new_arrays, head_states = [], []
    for p, g, s in zip(head.arrays(), grads.arrays(), states["head"]):
        p, s = adam_update(p, g, s)
        new_arrays.append(p)
        head_states.append(s)
    new_head = type(head).from_arrays(new_arrays)

    states = dict(states, head=head_states)
    if with_potgui and stack.K:
        alpha, states["alpha"] = adam_update(stack.alpha, g_alpha, states["alpha"])
        eta = stack.eta
        if stack.mode != ONE_PARAM:
            eta, states["eta"] = adam_update(stack.eta, g_eta, states["eta"])
        stack = stack.with_params(alpha, eta)
    return new_head, stack, states, loss


def split_indices(n, eval_fraction):
    """Train on the leading samples, evaluate on the trailing ``eval_fraction``."""
    n_eval = int(round(n * eval_fraction))
    if eval_fraction > 0 and n > 1:
        n_eval = min(max(n_eval, 1), n - 1)
    else:
        n_eval = 0
    train = np.arange(n - n_eval)
    held = np.arange(n - n_eval, n) if n_eval else train
    return train, held


def prepare(dataset, config):
    """``(features, labels, train_idx, eval_idx, num_classes)`` for a config."""
    scenes, stack = dataset
    features = select_layers(stack, config.layer_mode).astype(np.float64)
    labels = scenes.flat_labels()
    train_idx, eval_idx = split_indices(labels.shape[0], config.eval_fraction)
    return features, labels, train_idx, eval_idx, scenes.class_count


def _batches(idx, batch_size):
    for start in range(0, idx.size, batch_size):
        yield idx[start:start + batch_size]


def evaluate_head(head, features, labels, idx, num_classes, batch_size=64):
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for b in _batches(idx, batch_size):
        counts += confusion(labels[b], predict(head_forward(features[b], head)), num_classes)
    return report(counts)


def evaluate_guided(head, stack, features, labels, idx, num_classes, sigma, batch_size):
    """Diagnostic metrics on the blended logits; needs ground truth, so train split only."""
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for b in _batches(idx, batch_size):
        logits = head_forward(features[b], head)
        guided = pot_forward(logits, labels[b], stack).guided_logits
        counts += confusion(labels[b], predict(mix(logits, guided, sigma)), num_classes)
    return report(counts)


def train(dataset, config, with_potgui=True, progress=None):
    """Run the full loop on ``dataset = (SceneSet, FeatureStack)``.

    Batches are drawn from a per-epoch seeded shuffle of the training split; the
    last partial batch is kept. Evaluation always uses the head's raw logits.
    """
    features, labels, train_idx, eval_idx, num_classes = prepare(dataset, config)
    widths = (features.shape[-1],) + config.hidden + (num_classes,)
    head = init_head(widths, config.seed)
    stack = init_stack(config.K if with_potgui else 0, config.param_mode,
                       config.alpha0, config.eta0)
    states = init_optim(head, stack, config.hyper)
    shuffler = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    record = TrainRecord(config, with_potgui, head, stack)

    for epoch in range(1, config.epochs + 1):
        order = shuffler.permutation(train_idx)
        total, seen = 0.0, 0
        for j, b in enumerate(_batches(order, config.batch_size)):
            head, stack, states, loss = train_step(
                features[b], labels[b], head, stack, states, config, with_potgui, j)
            total += loss * b.size
            seen += b.size
        ev = guided = None
        if epoch % config.eval_every == 0 or epoch == config.epochs:
            ev = evaluate_head(head, features, labels, eval_idx, num_classes)
            if with_potgui and stack.K:
                guided = evaluate_guided(head, stack, features, labels, train_idx,
                                         num_classes, config.sigma, config.batch_size)
        record.epochs.append(EpochRecord(epoch, total / seen, ev, guided,
                                         stack.alpha.copy(), stack.eta.copy()))
        if progress is not None:
            progress(record.epochs[-1])
    record.head, record.stack = head, stack
    return record


def ablate(dataset, base_config, axis, values, with_potgui=True):
    """One seeded run per value of ``axis``; returns ``[(value, TrainRecord), ...]``."""
    if axis not in ABLATION_AXES:
        raise InvalidInputError(f"unknown ablation axis {axis!r}")
    values = list(values)
    if not values:
        raise InvalidInputError("ablation needs at least one value")
    name = ABLATION_AXES[axis]
    return [(v, train(dataset, replace(base_config, **{name: v}), with_potgui))
            for v in values]


def summarize(runs):
    """Rows of ``(value, final mIoU, final mF1, epochs to 90% of the run's best)``."""
    rows = []
    for value, rec in runs:
        final = next((e.eval for e in reversed(rec.epochs) if e.eval is not None), None)
        best = rec.best_miou()
        reach = rec.epochs_to_reach(0.9 * best) if not np.isnan(best) else None
        rows.append((value,
                     final.miou if final else float("nan"),
                     final.mf1 if final else float("nan"),
                     reach))
    return rows
