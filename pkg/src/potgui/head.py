"""Pixel-wise MLP perception head with a hand-written backward pass."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, InvalidInputError, UnsupportedVersionError

CHECKPOINT_MAGIC = b"PGHD"
CHECKPOINT_VERSION = 1


@dataclass
class HeadParams:
    weights: list  # (fan_in, fan_out) per layer
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInputError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InvalidInputError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise InvalidInputError(f"layer {i} does not compose with layer {i - 1}")

    @property
    def widths(self):
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def arrays(self):
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        return cls(list(arrays[0::2]), list(arrays[1::2]))


@dataclass
class HeadCache:
    features: np.ndarray
    params: HeadParams
    inputs: list  # input to each affine layer, flattened to (pixels, width)
    preacts: list  # hidden pre-activations


def init_head(widths, seed):
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or min(widths) < 1:
        raise InvalidInputError(f"invalid widths {widths}")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(widths, widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return HeadParams(weights, biases)


def head_forward(features, params, return_cache=False):
    """Apply the MLP independently at every pixel of ``features[..., D_in]``."""
    features = np.asarray(features)
    d_in = params.weights[0].shape[0]
    if features.shape[-1] != d_in:
        raise InvalidInputError(f"feature width {features.shape[-1]} != head input {d_in}")
    lead = features.shape[:-1]
    x = features.reshape(-1, d_in)
    inputs, preacts = [], []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(x)
        z = x @ w + b
        if i < last:
            preacts.append(z)
            x = np.maximum(z, 0.0)
        else:
            x = z
    logits = x.reshape(lead + (x.shape[-1],))
    if return_cache:
        return logits, HeadCache(features, params, inputs, preacts)
    return logits


def head_backward(features, params, upstream, cache=None):
    """Gradients of a scalar loss given ``upstream = dLoss/dlogits``.

    Returns ``(HeadParams of gradients, feature gradient)``. A cache from
    :func:`head_forward` must belong to the same ``features`` and ``params``
    objects; without one the forward is recomputed.
    """
    if cache is None:
        _, cache = head_forward(features, params, return_cache=True)
    elif cache.features is not features or cache.params is not params:
        raise ContractError("head cache is stale: recorded for different features or params")
    upstream = np.asarray(upstream)
    c = params.weights[-1].shape[1]
    if upstream.shape != features.shape[:-1] + (c,):
        raise InvalidInputError(f"upstream shape {upstream.shape} does not match logits")
    delta = upstream.reshape(-1, c)
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = cache.inputs[i].T @ delta
        gb[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            delta = delta * (cache.preacts[i - 1] > 0)
    return HeadParams(gw, gb), delta.reshape(features.shape)


def save_head(path, params):
    widths = params.widths
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(widths)))
        fh.write(struct.pack(f"<{len(widths)}I", *widths))
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_head(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected PGHD", 0)
    if len(blob) < 12:
        raise FormatError("truncated header", len(blob))
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    offset = 12
    if n < 2 or len(blob) < offset + 4 * n:
        raise FormatError("truncated or invalid width list", offset)
    widths = struct.unpack_from(f"<{n}I", blob, offset)
    offset += 4 * n
    arrays = []
    for a, b in zip(widths, widths[1:]):
        for shape in ((a, b), (b,)):
            size = int(np.prod(shape)) * 8
            if len(blob) < offset + size:
                raise FormatError("truncated parameter data", len(blob))
            arrays.append(np.frombuffer(blob, "<f8", int(np.prod(shape)), offset)
                          .reshape(shape).astype(np.float64))
            offset += size
    if offset != len(blob):
        raise FormatError("trailing bytes after parameters", offset)
    return HeadParams.from_arrays(arrays)
