"""Synthetic street-scene stand-in: label maps, simulated backbone features, PGSD files.

The simulated backbone emits ``L`` feature layers per pixel. Layer ``l`` is a
fixed random embedding of the pixel's class plus Gaussian noise whose scale is
``base_noise / snr(l)``; ``snr`` peaks in the middle of the stack.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInputError, UnsupportedVersionError

LAYER_MODES = ("Last", "Middle_1", "All_Avg", "Middle_4_Avg", "Middle_4", "All")

PGSD_MAGIC = b"PGSD"
PGSD_VERSION = 1
_HEADER = struct.Struct("<4s7I")

_SHAPE_KINDS = ("rect", "disc", "band")
_MAX_ATTEMPTS = 200


@dataclass
class SceneSet:
    labels: np.ndarray  # (N, H, W) int64
    class_count: int
    geometry: list = field(default_factory=list)  # per sample: [(kind, class, params), ...]

    @property
    def count(self):
        return self.labels.shape[0]

    @property
    def height(self):
        return self.labels.shape[1]

    @property
    def width(self):
        return self.labels.shape[2]

    def flat_labels(self):
        """Labels as ``(N, P)`` with ``P = H * W``, row-major."""
        return self.labels.reshape(self.count, -1)


@dataclass
class FeatureStack:
    layers: np.ndarray  # (L, N, P, D) float32
    layer_snr: np.ndarray

    @property
    def num_layers(self):
        return self.layers.shape[0]

    @property
    def dims(self):
        return self.layers.shape[-1]


def _draw_shape(rng, canvas, cls):
    h, w = canvas.shape
    kind = _SHAPE_KINDS[rng.integers(len(_SHAPE_KINDS))]
    if kind == "rect":
        rh = int(rng.integers(max(2, h // 6), max(3, h // 2) + 1))
        rw = int(rng.integers(max(2, w // 6), max(3, w // 2) + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        canvas[y0:y0 + rh, x0:x0 + rw] = cls
        params = (y0, x0, rh, rw)
    elif kind == "disc":
        r = float(rng.uniform(min(h, w) / 10, min(h, w) / 4))
        cy, cx = float(rng.uniform(0, h)), float(rng.uniform(0, w))
        yy, xx = np.mgrid[0:h, 0:w]
        canvas[(yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r] = cls
        params = (cy, cx, r)
    else:
        bh = int(rng.integers(max(1, h // 10), max(2, h // 4) + 1))
        y0 = int(rng.integers(0, h - bh + 1))
        canvas[y0:y0 + bh, :] = cls
        params = (y0, bh)
    return kind, cls, params


def generate_scenes(count, height, width, num_classes, seed):
    """Random label maps: rectangles, discs and horizontal bands over class 0.

    Regenerates (deterministically) until every class occurs somewhere in the set.
    """
    if num_classes < 2:
        raise InvalidInputError(f"need at least 2 classes, got {num_classes}")
    if count < 1:
        raise InvalidInputError(f"count must be >= 1, got {count}")
    if height < 8 or width < 8:
        raise InvalidInputError(f"height and width must be >= 8, got {height}x{width}")
    if num_classes > height * width:
        raise InvalidInputError(f"{num_classes} classes cannot fit in {height}x{width} pixels")

    rng = np.random.default_rng(seed)
    fg = np.arange(1, num_classes)
    for _ in range(_MAX_ATTEMPTS):
        labels = np.zeros((count, height, width), dtype=np.int64)
        geometry = []
        cycle = []
        for n in range(count):
            shapes = []
            for _ in range(int(rng.integers(2, 2 + max(2, num_classes - 1)))):
                if not cycle:
                    cycle = list(rng.permutation(fg))
                shapes.append(_draw_shape(rng, labels[n], int(cycle.pop())))
            geometry.append(shapes)
        if np.unique(labels).size == num_classes:
            return SceneSet(labels, num_classes, geometry)
    raise InvalidInputError("could not place every class; enlarge the scenes or the count")


def snr_profile(num_layers):
    """Concave signal-to-noise profile over backbone depth, peaking mid-stack."""
    idx = np.arange(num_layers, dtype=np.float64)
    centre = (num_layers - 1) / 2.0
    half = (num_layers + 1) / 2.0
    return 0.25 + 0.75 * (1.0 - ((idx - centre) / half) ** 2)


def synth_features(scenes, num_layers, dims, base_noise, seed):
    if num_layers < 1:
        raise InvalidInputError("need at least one layer")
    if dims < scenes.class_count:
        raise InvalidInputError(f"dims ({dims}) must be >= class count ({scenes.class_count})")
    if base_noise < 0:
        raise InvalidInputError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    snr = snr_profile(num_layers)
    labels = scenes.flat_labels()
    layers = np.empty((num_layers,) + labels.shape + (dims,), dtype=np.float32)
    for layer in range(num_layers):
        proto = rng.standard_normal((scenes.class_count, dims))
        proto /= np.linalg.norm(proto, axis=1, keepdims=True)
        noise = rng.standard_normal(labels.shape + (dims,))
        layers[layer] = proto[labels] + noise * (base_noise / snr[layer])
    return FeatureStack(layers, snr)


def middle_window(num_layers):
    mid = num_layers // 2
    return list(range(mid - 2, mid + 2))


def select_layers(stack, mode):
    """Per-pixel features for one layer-selection mode, shape ``(N, P, width)``."""
    L = stack.num_layers
    if mode not in LAYER_MODES:
        raise InvalidInputError(f"unknown layer mode {mode!r}; expected one of {LAYER_MODES}")
    if mode.startswith("Middle_4") and L < 4:
        raise InvalidInputError(f"{mode} needs at least 4 layers, stack has {L}")
    layers = stack.layers
    if mode == "Last":
        return layers[L - 1]
    if mode == "Middle_1":
        return layers[L // 2]
    if mode == "All_Avg":
        return layers.mean(axis=0, dtype=np.float64).astype(layers.dtype)
    window = middle_window(L)
    if mode == "Middle_4_Avg":
        return layers[window].mean(axis=0, dtype=np.float64).astype(layers.dtype)
    chosen = layers[window] if mode == "Middle_4" else layers
    return np.concatenate(list(chosen), axis=-1)


def _record_dtype(pixels, num_layers, dims):
    return np.dtype([("labels", "<u2", (pixels,)),
                     ("features", "<f4", (num_layers, pixels, dims))])


def write_dataset(path, scenes, stack):
    n, h, w = scenes.labels.shape
    L, sn, p, d = stack.layers.shape
    if sn != n or p != h * w:
        raise InvalidInputError("scene set and feature stack disagree on shape")
    if scenes.class_count > 65536:
        raise InvalidInputError("class ids must fit in 16 bits")
    records = np.empty(n, dtype=_record_dtype(p, L, d))
    records["labels"] = scenes.flat_labels()
    records["features"] = np.moveaxis(stack.layers, 0, 1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PGSD_MAGIC, PGSD_VERSION, n, h, w,
                              scenes.class_count, L, d))
        fh.write(records.tobytes())


def read_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != PGSD_MAGIC:
        raise FormatError("bad magic, expected PGSD", 0)
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    _, version, n, h, w, c, L, d = _HEADER.unpack_from(blob)
    if version != PGSD_VERSION:
        raise UnsupportedVersionError(f"unsupported PGSD version {version}", 4)
    if c < 2 or L < 1 or d < 1 or n < 1 or h < 1 or w < 1:
        raise FormatError("header fields out of range", 8)
    rec = _record_dtype(h * w, L, d)
    expected = _HEADER.size + n * rec.itemsize
    if len(blob) < expected:
        raise FormatError(f"truncated body: expected {expected} bytes, got {len(blob)}",
                          len(blob))
    if len(blob) > expected:
        raise FormatError("trailing bytes after last sample", expected)
    records = np.frombuffer(blob, dtype=rec, count=n, offset=_HEADER.size)
    labels = records["labels"].astype(np.int64)
    bad = np.flatnonzero(labels.reshape(-1) >= c)
    if bad.size:
        i = int(bad[0])
        offset = _HEADER.size + (i // (h * w)) * rec.itemsize + 2 * (i % (h * w))
        raise FormatError(f"label {labels.reshape(-1)[i]} >= class count {c}", offset)
    layers = np.ascontiguousarray(np.moveaxis(records["features"], 1, 0)).astype(np.float32)
    return (SceneSet(labels.reshape(n, h, w), c, []),
            FeatureStack(layers, snr_profile(L)))
