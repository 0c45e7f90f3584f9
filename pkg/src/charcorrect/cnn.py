"""Character-sequence encoding CNN: a conv stack feeding 23 independent 37-way heads.

ReLU follows every weight layer except the heads. Each head ``i`` estimates
``P(c_i | image)`` for the ``i``-th right-justified position of the word.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._rng import substream
from ._validation import DivergenceError, GeometryError, ShapeError, as_float_array
from .alphabet import FRAME_LENGTH, N_CLASSES, indices_word
from .classify import LOG_EPS, TrainingHyper, sgd_step, softmax
from .seq2seq import encode_target
from .tensor import (
    affine,
    affine_backward,
    conv2d,
    conv2d_backward,
    format_tensor,
    max_pool,
    max_pool_backward,
    output_extent,
    parse_tensor,
)


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    filters: int
    stride: int = 1


@dataclass(frozen=True)
class PoolSpec:
    window: int = 2
    stride: int | None = None


@dataclass(frozen=True)
class DenseSpec:
    units: int


_KINDS = {"conv": ConvSpec, "pool": PoolSpec, "dense": DenseSpec}


@dataclass(frozen=True)
class CnnConfig:
    name: str
    layers: tuple
    input_shape: tuple[int, int, int] = (32, 100, 1)
    head_count: int = FRAME_LENGTH
    class_count: int = N_CLASSES

    def __post_init__(self):
        self.shapes()  # validates the geometry chain

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape after the input and after each layer (spatial ``HxWxC`` or flat ``(n,)``)."""
        if self.head_count < 1 or self.class_count < 2:
            raise GeometryError("need at least one head and two classes")
        shape: tuple[int, ...] = tuple(self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise GeometryError(f"input extents must be H x W x C, got {shape}")
        out = [shape]
        for layer in self.layers:
            if isinstance(layer, ConvSpec):
                if len(shape) != 3:
                    raise GeometryError("convolution after a dense layer")
                h, w, _ = shape
                shape = (output_extent(h, layer.kernel, layer.stride),
                         output_extent(w, layer.kernel, layer.stride), layer.filters)
            elif isinstance(layer, PoolSpec):
                if len(shape) != 3:
                    raise GeometryError("pooling after a dense layer")
                h, w, c = shape
                s = layer.stride or layer.window
                shape = (output_extent(h, layer.window, s), output_extent(w, layer.window, s), c)
            elif isinstance(layer, DenseSpec):
                shape = (layer.units,)
            else:
                raise TypeError(f"unknown layer spec {layer!r}")
            out.append(shape)
        return out

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.shapes()[-1]))

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            kind = next(k for k, cls in _KINDS.items() if isinstance(layer, cls))
            layers.append({"kind": kind, **layer.__dict__})
        return {"name": self.name, "layers": layers, "input_shape": list(self.input_shape),
                "head_count": self.head_count, "class_count": self.class_count}

    @classmethod
    def from_json(cls, doc: dict) -> "CnnConfig":
        layers = []
        for entry in doc["layers"]:
            entry = dict(entry)
            layers.append(_KINDS[entry.pop("kind")](**entry))
        return cls(doc["name"], tuple(layers), tuple(doc["input_shape"]),
                   doc.get("head_count", FRAME_LENGTH), doc.get("class_count", N_CLASSES))


CONFIGS = {
    "tiny-chars": CnnConfig(
        "tiny-chars", (ConvSpec(3, 8), ConvSpec(3, 16), PoolSpec(2), DenseSpec(64)), (32, 100, 1)),
    # Four convs with 2x2 pools after the first three and two dense layers;
    # 44x116 is the smallest-ish extent for which that chain tiles exactly.
    "paper-chars": CnnConfig(
        "paper-chars",
        (ConvSpec(5, 64), PoolSpec(2), ConvSpec(5, 128), PoolSpec(2), ConvSpec(3, 256), PoolSpec(2),
         ConvSpec(3, 512), DenseSpec(4096), DenseSpec(4096)),
        (44, 116, 1)),
    "micro": CnnConfig("micro", (ConvSpec(3, 2), PoolSpec(2), DenseSpec(5)), (8, 8, 1),
                       head_count=2, class_count=4),
}


def get_config(name: str) -> CnnConfig:
    try:
        return CONFIGS[name]
    except KeyError:
        raise KeyError(f"unknown CNN config {name!r}; known: {', '.join(sorted(CONFIGS))}") from None


def param_count(kernel: int, channels: int, neurons: int, sharing: bool = True,
                output_hw: tuple[int, int] | None = None) -> int:
    """Weights of a conv layer: ``k*k*C*neurons`` shared, times ``H'*W'`` unshared (biases excluded)."""
    n = kernel * kernel * channels * neurons
    if sharing:
        return n
    if output_hw is None:
        raise ValueError("unshared count needs the output extents")
    return n * output_hw[0] * output_hw[1]


def init_params(config: CnnConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-uniform weights, zero biases; names ``L{i}.W`` / ``L{i}.b`` and ``heads.W`` / ``heads.b``."""
    rng = substream(seed, "cnn-init")
    shapes = config.shapes()
    params = {}
    for i, layer in enumerate(config.layers):
        prev = shapes[i]
        if isinstance(layer, ConvSpec):
            fan_in = layer.kernel * layer.kernel * prev[2]
            lim = np.sqrt(6.0 / fan_in)
            params[f"L{i}.W"] = rng.uniform(-lim, lim, (layer.kernel, layer.kernel, prev[2], layer.filters))
            params[f"L{i}.b"] = np.zeros(layer.filters)
        elif isinstance(layer, DenseSpec):
            fan_in = int(np.prod(prev))
            lim = np.sqrt(6.0 / fan_in)
            params[f"L{i}.W"] = rng.uniform(-lim, lim, (layer.units, fan_in))
            params[f"L{i}.b"] = np.zeros(layer.units)
    d = config.feature_dim
    lim = np.sqrt(6.0 / (d + config.class_count))
    params["heads.W"] = rng.uniform(-lim, lim, (config.head_count * config.class_count, d))
    params["heads.b"] = np.zeros(config.head_count * config.class_count)
    return params


def zero_params(config: CnnConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in _param_shapes(config).items()}


def _check_params(config: CnnConfig, params: dict) -> None:
    for k, shape in _param_shapes(config).items():
        if k not in params:
            raise ShapeError(f"missing parameter {k}")
        if params[k].shape != shape:
            raise ShapeError(f"parameter {k} has shape {params[k].shape}, expected {shape}")


def _param_shapes(config: CnnConfig) -> dict[str, tuple[int, ...]]:
    shapes = config.shapes()
    out = {}
    for i, layer in enumerate(config.layers):
        prev = shapes[i]
        if isinstance(layer, ConvSpec):
            out[f"L{i}.W"] = (layer.kernel, layer.kernel, prev[2], layer.filters)
            out[f"L{i}.b"] = (layer.filters,)
        elif isinstance(layer, DenseSpec):
            out[f"L{i}.W"] = (layer.units, int(np.prod(prev)))
            out[f"L{i}.b"] = (layer.units,)
    n = config.head_count * config.class_count
    out["heads.W"] = (n, config.feature_dim)
    out["heads.b"] = (n,)
    return out


def _as_images(config: CnnConfig, images) -> tuple[np.ndarray, bool]:
    x = as_float_array(images, "image")
    if x.ndim == 2 and config.input_shape[2] == 1:
        x = x[:, :, None]
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(config.input_shape):
        raise GeometryError(f"image shape {x.shape[1:] if x.ndim == 4 else x.shape} "
                            f"does not match config input {tuple(config.input_shape)}")
    return x, single


def _forward(config: CnnConfig, params: dict, x: np.ndarray):
    """Batch forward; returns head probabilities ``N x heads x classes`` and a backward cache."""
    cache = []
    a = x
    for i, layer in enumerate(config.layers):
        if isinstance(layer, ConvSpec):
            z = conv2d(a, params[f"L{i}.W"], layer.stride) + params[f"L{i}.b"]
            cache.append(("conv", i, a, z))
            a = np.maximum(z, 0.0)
        elif isinstance(layer, PoolSpec):
            out, idx = max_pool(a, layer.window, layer.stride, return_indices=True)
            cache.append(("pool", i, a.shape, idx))
            a = out
        else:
            flat = a.reshape(len(a), -1)
            z = affine(flat, params[f"L{i}.W"], params[f"L{i}.b"])
            cache.append(("dense", i, flat, a.shape, z))
            a = np.maximum(z, 0.0)
    feats = a.reshape(len(a), -1)
    logits = affine(feats, params["heads.W"], params["heads.b"])
    probs = softmax(logits.reshape(len(a), config.head_count, config.class_count))
    return probs, (cache, feats, a.shape)


def cnn_forward(config: CnnConfig, params: dict, image) -> np.ndarray:
    """Per-position class distributions: ``heads x classes`` (or ``N x heads x classes`` for a batch)."""
    _check_params(config, params)
    x, single = _as_images(config, image)
    probs, _ = _forward(config, params, x)
    return probs[0] if single else probs


def encode_targets(words, config: CnnConfig, context_min: int = 0) -> np.ndarray:
    """Right-justified, ∅-padded head targets (the terminal LSTM frame is dropped)."""
    if config.class_count != N_CLASSES or config.head_count != FRAME_LENGTH:
        raise GeometryError("word targets need the full 23-head, 37-class geometry")
    return np.array([encode_target(w, FRAME_LENGTH, context_min)[:FRAME_LENGTH] for w in words], dtype=np.int64)


def loss_and_gradients(config: CnnConfig, params: dict, images, targets) -> tuple[float, dict]:
    """Sum over the batch and all heads of per-head cross-entropy, with analytic gradients."""
    _check_params(config, params)
    x, _ = _as_images(config, images)
    t = np.asarray(targets, dtype=np.int64).reshape(len(x), config.head_count)
    if t.min() < 0 or t.max() >= config.class_count:
        raise ValueError("target class out of range")
    probs, (cache, feats, last_shape) = _forward(config, params, x)
    n, heads = np.arange(len(x))[:, None], np.arange(config.head_count)[None, :]
    loss = float(-np.log(np.maximum(probs[n, heads, t], LOG_EPS)).sum())
    d = probs.copy()
    d[n, heads, t] -= 1.0
    d = d.reshape(len(x), -1)
    grads = {}
    dfeat, grads["heads.W"], grads["heads.b"] = affine_backward(feats, params["heads.W"], d)
    g = dfeat.reshape(last_shape)
    for entry in reversed(cache):
        kind, i = entry[0], entry[1]
        if kind == "conv":
            _, _, a_in, z = entry
            g = g * (z > 0)
            grads[f"L{i}.b"] = g.sum(axis=(0, 1, 2))
            g, grads[f"L{i}.W"] = conv2d_backward(a_in, params[f"L{i}.W"], g, config.layers[i].stride)
        elif kind == "pool":
            _, _, in_shape, idx = entry
            layer = config.layers[i]
            g = max_pool_backward(g, idx, in_shape, layer.window, layer.stride)
        else:
            _, _, flat, in_shape, z = entry
            g = g.reshape(z.shape) * (z > 0)
            dflat, grads[f"L{i}.W"], grads[f"L{i}.b"] = affine_backward(flat, params[f"L{i}.W"], g)
            g = dflat.reshape(in_shape)
    return loss, grads


def cnn_train_step(config: CnnConfig, params: dict, images, targets, hyper: TrainingHyper,
                   velocity: dict | None = None) -> float:
    """One SGD + momentum update in place; returns the pre-update loss."""
    loss, grads = loss_and_gradients(config, params, images, targets)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite CNN loss")
    sgd_step(params, grads, {} if velocity is None else velocity, hyper)
    return loss


def predict_word(maps) -> str:
    """Per-position argmax (ties to the lowest index), ∅ positions stripped."""
    m = as_float_array(maps, "maps", ndim=2)
    if m.shape[1] != N_CLASSES:
        raise ShapeError(f"expected rows of {N_CLASSES} probabilities, got {m.shape}")
    return indices_word(m.argmax(axis=1))


def save_checkpoint(config: CnnConfig, params: dict, path) -> None:
    doc = {
        "format_version": 1,
        "kind": "cnn",
        "config": config.to_json(),
        "params": {k: format_tensor(params[k]) for k in sorted(params)},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[CnnConfig, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1 or doc.get("kind") != "cnn":
        raise ValueError(f"{path}: not a version-1 CNN checkpoint")
    config = CnnConfig.from_json(doc["config"])
    params = {k: parse_tensor(v) for k, v in doc["params"].items()}
    _check_params(config, params)
    return config, params


class CharSequenceCNN(BaseEstimator):
    """Estimator wrapper: ``fit(images, words)``; ``predict`` returns words."""

    def __init__(self, config="tiny-chars", learning_rate=1e-3, momentum=0.9, batch_size=16,
                 n_epochs=5, random_state=0):
        self.config = config
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.random_state = random_state

    def _config(self) -> CnnConfig:
        return get_config(self.config) if isinstance(self.config, str) else self.config

    def fit(self, images, words):
        config = self._config()
        x, _ = _as_images(config, images)
        t = encode_targets(words, config)
        if len(x) != len(t):
            raise ShapeError(f"{len(x)} images vs {len(t)} words")
        hyper = TrainingHyper(self.learning_rate, self.momentum, self.batch_size)
        self.params_ = init_params(config, self.random_state)
        rng = substream(self.random_state, "cnn-shuffle")
        velocity: dict = {}
        self.loss_curve_ = []
        for _ in range(self.n_epochs):
            order = rng.permutation(len(x))
            total = 0.0
            for s in range(0, len(x), self.batch_size):
                idx = np.sort(order[s:s + self.batch_size])
                total += cnn_train_step(config, self.params_, x[idx], t[idx], hyper, velocity)
            self.loss_curve_.append(total / len(x))
        self.config_ = config
        return self

    def predict_proba(self, images) -> np.ndarray:
        check_is_fitted(self, "params_")
        x, single = _as_images(self.config_, images)
        probs = cnn_forward(self.config_, self.params_, x)
        return probs[0] if single else probs

    def predict(self, images) -> list[str]:
        probs = self.predict_proba(images)
        if probs.ndim == 2:
            probs = probs[None]
        return [predict_word(p) for p in probs]


__all__ = [
    "ConvSpec", "PoolSpec", "DenseSpec", "CnnConfig", "CONFIGS", "get_config", "param_count",
    "init_params", "zero_params", "cnn_forward", "encode_targets", "loss_and_gradients",
    "cnn_train_step", "predict_word", "save_checkpoint", "load_checkpoint", "CharSequenceCNN",
]
