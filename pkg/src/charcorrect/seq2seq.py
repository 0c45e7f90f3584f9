"""Fixed-frame sequence correction with stacked bidirectional LSTMs.

A word is encoded right-justified in 23 frames, preceded by empty symbols and
followed by one terminal empty symbol at frame 24, so the corrector maps 23
character-probability rows (plus one appended all-empty row) to 24 class
distributions. Arbitrary corrected lengths, including insertions and
deletions relative to the input, fit the same frame.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._rng import substream
from ._validation import DivergenceError, ShapeError, check_probability_rows
from .alphabet import EMPTY, FRAME_LENGTH, N_CLASSES, indices_word, normalize_word, word_indices
from .classify import TrainingHyper, cross_entropy, sgd_step, softmax
from .rnn import BlstmLayer, INIT_SCALE, blstm_bptt, blstm_forward, dropout_mask
from .tensor import format_tensor, parse_tensor

log = logging.getLogger(__name__)

N_STEPS = FRAME_LENGTH + 1
DEFAULT_CONTEXT = 3


def encode_target(word: str, frame_length: int = FRAME_LENGTH, context_min: int = DEFAULT_CONTEXT) -> np.ndarray:
    """Right-justified target of ``frame_length + 1`` class indices.

    The word ends at frame ``frame_length`` (0-based index ``frame_length - 1``)
    and the final index is always the terminal empty symbol.
    """
    word = normalize_word(word)
    limit = frame_length - context_min
    if len(word) > limit:
        raise ValueError(f"word {word!r} longer than {limit} (frame {frame_length}, context {context_min})")
    target = np.full(frame_length + 1, EMPTY, dtype=np.int64)
    if word:
        target[frame_length - len(word):frame_length] = word_indices(word)
    return target


def decode_output(indices) -> str:
    """Non-empty symbols in order; interior empties are skipped, not treated as terminators."""
    return indices_word(indices)


# ---------------------------------------------------------------------------
# architectures

@dataclass(frozen=True)
class ArchitectureSpec:
    """BLSTM stack shape. ``dropout[i]`` is the rate applied after layer ``i`` (0 = none)."""

    name: str
    units: tuple[int, ...]
    dropout: tuple[float, ...] = ()
    peepholes: bool = True
    learn_init: bool = True

    def __post_init__(self):
        if not self.units:
            raise ValueError("an architecture needs at least one BLSTM layer")
        if any(u < 1 for u in self.units):
            raise ValueError("unit counts must be positive")
        drop = self.dropout or (0.0,) * len(self.units)
        if len(drop) != len(self.units):
            raise ValueError("dropout needs one rate per BLSTM layer")
        if any(not 0 <= p < 1 for p in drop):
            raise ValueError("dropout rates must lie in [0, 1)")
        object.__setattr__(self, "dropout", tuple(float(p) for p in drop))
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))

    def widths(self, n_in: int = N_CLASSES) -> list[int]:
        """Feature width entering each layer, then the readout width."""
        return [n_in, *(2 * u for u in self.units), N_CLASSES]


def _after_first(rate: float, n: int) -> tuple[float, ...]:
    return (0.0,) + (rate,) * (n - 1)


ARCHITECTURES: dict[str, ArchitectureSpec] = {
    spec.name: spec
    for spec in [
        ArchitectureSpec("model-1", (102, 156)),
        ArchitectureSpec("model-2", (102, 156, 256)),
        ArchitectureSpec("model-3", (80, 85, 93)),
        ArchitectureSpec("model-4", (200, 200, 200, 200)),
        ArchitectureSpec("model-5", (150, 150, 150, 150, 150)),
        ArchitectureSpec("model-6", (200, 250, 300, 350)),
        ArchitectureSpec("model-7", (200, 200, 200, 200, 200)),
        ArchitectureSpec("model-8", (200, 250, 300, 350, 400)),
        ArchitectureSpec("model-9", (300, 350, 400, 450, 500)),
        ArchitectureSpec("model-10", (100, 120, 140, 160, 170, 180)),
        ArchitectureSpec("model-11", (300, 320, 340, 360, 370, 380)),
        ArchitectureSpec("model-12", (350, 300, 250, 200)),
        ArchitectureSpec("model-13", (500, 450, 300, 250, 200)),
        ArchitectureSpec("model-14", (102, 156), (0.5, 0.5)),
        ArchitectureSpec("model-15", (350, 300, 250, 200), _after_first(0.5, 4)),
        ArchitectureSpec("model-16", (350, 300, 250, 200, 150), _after_first(0.5, 5)),
        ArchitectureSpec("model-17", (450, 400, 350, 300), _after_first(0.5, 4)),
        ArchitectureSpec("model-18", (350, 300, 250, 200), _after_first(0.3, 4)),
        ArchitectureSpec("17-mini", (64, 56, 48, 40), _after_first(0.5, 4)),
    ]
}
DEFAULT_ARCH = "17-mini"

# Desk-scale training recipe for DEFAULT_ARCH on the 200-word acceptance task.
RECIPE_LR = 2e-2
RECIPE_BATCH = 32
RECIPE_EPOCHS = 125
RECIPE_CLIP = 20.0  # global L2 norm of the summed minibatch gradient
RECIPE_FORGET_BIAS = 1.0


def get_architecture(name: str) -> ArchitectureSpec:
    try:
        return ARCHITECTURES[name]
    except KeyError:
        known = ", ".join(ARCHITECTURES)
        raise KeyError(f"unknown architecture {name!r}; known: {known}") from None


# ---------------------------------------------------------------------------
# model

@dataclass
class CorrectorModel:
    spec: ArchitectureSpec
    layers: list[BlstmLayer]
    W_out: np.ndarray  # N_CLASSES x 2u_last
    b_out: np.ndarray
    n_in: int = N_CLASSES

    def __post_init__(self):
        widths = self.spec.widths(self.n_in)
        if len(self.layers) != len(self.spec.units):
            raise ShapeError("layer count does not match the architecture")
        for k, layer in enumerate(self.layers):
            if layer.forward.input_dim != widths[k] or layer.units != self.spec.units[k]:
                raise ShapeError(f"layer {k} geometry does not match the architecture")
        if self.W_out.shape != (N_CLASSES, widths[-2]) or self.b_out.shape != (N_CLASSES,):
            raise ShapeError("readout geometry does not match the architecture")

    @classmethod
    def init(cls, spec: ArchitectureSpec, seed: int = 0, n_in: int = N_CLASSES,
             scale: float = INIT_SCALE, forget_bias: float = RECIPE_FORGET_BIAS) -> "CorrectorModel":
        rng = substream(seed, "init")
        widths = spec.widths(n_in)
        layers = [
            BlstmLayer.init(widths[k], u, rng, spec.peepholes, spec.learn_init, scale, forget_bias)
            for k, u in enumerate(spec.units)
        ]
        W_out = rng.uniform(-scale, scale, size=(N_CLASSES, widths[-2]))
        return cls(spec, layers, W_out, np.zeros(N_CLASSES), n_in)

    def params(self) -> dict[str, np.ndarray]:
        p = {}
        for k, layer in enumerate(self.layers):
            p.update({f"layer{k}.{name}": v for name, v in layer.params().items()})
        p["out.W"] = self.W_out
        p["out.b"] = self.b_out
        return p

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())


def onehot_maps(maps) -> np.ndarray:
    """Replace every probability row by the one-hot of its argmax (ablation input mode)."""
    m = np.asarray(maps, dtype=np.float64)
    return np.eye(N_CLASSES)[m.argmax(axis=-1)]


def _time_major(maps) -> tuple[np.ndarray, bool]:
    """Append the all-empty frame and return ``24 x B x 37``."""
    x = np.asarray(maps, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != N_CLASSES:
        raise ShapeError(f"expected B x T x {N_CLASSES} probability maps, got shape {x.shape}")
    tail = np.zeros((x.shape[0], 1, N_CLASSES))
    tail[..., EMPTY] = 1.0
    return np.concatenate([x, tail], axis=1).transpose(1, 0, 2), single


@dataclass
class _Cache:
    inputs: list[np.ndarray] = field(default_factory=list)
    traces: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    top: np.ndarray | None = None


def _forward(model: CorrectorModel, x: np.ndarray, rng=None) -> tuple[np.ndarray, _Cache]:
    """``x`` is ``T x B x D``; dropout is active only when ``rng`` is given."""
    cache = _Cache()
    h = x
    for layer, rate in zip(model.layers, model.spec.dropout):
        cache.inputs.append(h)
        h, trace = blstm_forward(layer, h)
        cache.traces.append(trace)
        mask = dropout_mask(h.shape, rate, rng) if (rng is not None and rate > 0) else None
        if mask is not None:
            h = h * mask
        cache.masks.append(mask)
    cache.top = h
    probs = softmax(h @ model.W_out.T + model.b_out)
    return probs, cache


def corrector_forward(model: CorrectorModel, maps) -> np.ndarray:
    """Inference-mode distributions, ``24 x 37`` per input (``B x 24 x 37`` for a batch)."""
    x, single = _time_major(maps)
    if x.shape[0] != N_STEPS:
        raise ShapeError(f"expected {FRAME_LENGTH} input rows, got {x.shape[0] - 1}")
    probs, _ = _forward(model, x)
    probs = probs.transpose(1, 0, 2)
    return probs[0] if single else probs


def loss_and_gradients(model: CorrectorModel, maps, targets, rng=None) -> tuple[float, dict[str, np.ndarray]]:
    """Summed per-timestep cross-entropy over the batch and its gradients."""
    x, _ = _time_major(maps)
    y = np.asarray(targets, dtype=np.int64)
    if y.ndim == 1:
        y = y[None]
    T, B, _ = x.shape
    if y.shape != (B, T):
        raise ShapeError(f"targets shape {y.shape} != {(B, T)}")
    probs, cache = _forward(model, x, rng)
    onehot = np.eye(N_CLASSES)[y.T]
    loss = float(cross_entropy(probs, onehot).sum())
    d_logits = (probs - onehot).reshape(T * B, N_CLASSES)
    top = cache.top.reshape(T * B, -1)
    grads = {"out.W": d_logits.T @ top, "out.b": d_logits.sum(axis=0)}
    dh = (d_logits @ model.W_out).reshape(T, B, -1)
    for k in range(len(model.layers) - 1, -1, -1):
        if cache.masks[k] is not None:
            dh = dh * cache.masks[k]
        g, dh = blstm_bptt(model.layers[k], cache.traces[k], dh)
        grads.update({f"layer{k}.{name}": v for name, v in g.items()})
    return loss, grads


def predict_indices(model: CorrectorModel, maps) -> np.ndarray:
    return corrector_forward(model, maps).argmax(axis=-1)


def correct(model: CorrectorModel, maps) -> str | list[str]:
    """Decode the per-timestep argmax of the corrector's output."""
    idx = predict_indices(model, maps)
    if idx.ndim == 1:
        return decode_output(idx)
    return [decode_output(row) for row in idx]


def sequence_accuracy(model: CorrectorModel, maps, targets, batch_size: int = 512) -> float:
    y = np.asarray(targets)
    hits = 0
    for s in range(0, len(y), batch_size):
        pred = predict_indices(model, maps[s:s + batch_size])
        hits += int(np.all(pred == y[s:s + batch_size], axis=1).sum())
    return hits / len(y)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place to global L2 norm ``<= max_norm``; returns the original norm."""
    norm = float(np.sqrt(sum(np.vdot(g, g) for g in grads.values())))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_seq_accuracy: float | None


def train_corrector(
    model: CorrectorModel,
    maps,
    targets,
    hyper: TrainingHyper | None = None,
    n_epochs: int = 10,
    seed: int = 0,
    validation=None,
    callback=None,
    clip_norm: float | None = None,
) -> list[EpochRecord]:
    """Minibatch SGD + momentum over shuffled pairs; returns per-epoch history.

    ``train_loss`` is the mean per-sequence loss (summed over 24 frames).
    Gradients are summed over each minibatch and, with ``clip_norm``, rescaled
    so their global L2 norm never exceeds it. Deterministic given ``seed``.
    """
    if clip_norm is not None and clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    hyper = hyper or TrainingHyper()
    maps = np.asarray(maps, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if len(maps) == 0:
        raise ValueError("empty training set")
    if len(maps) != len(targets):
        raise ShapeError(f"{len(maps)} inputs vs {len(targets)} targets")
    shuffle_rng = substream(seed, "shuffle")
    drop_rng = substream(seed, "dropout")
    params = model.params()
    velocity: dict = {}
    history = []
    for epoch in range(1, n_epochs + 1):
        order = shuffle_rng.permutation(len(maps))
        total = 0.0
        for s in range(0, len(order), hyper.batch_size):
            idx = np.sort(order[s:s + hyper.batch_size])
            loss, grads = loss_and_gradients(model, maps[idx], targets[idx], drop_rng)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            total += loss
            if clip_norm is not None:
                clip_gradients(grads, clip_norm)
            try:
                sgd_step(params, grads, velocity, hyper)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from None
        val = None
        if validation is not None:
            val = sequence_accuracy(model, *validation)
        rec = EpochRecord(epoch, total / len(maps), val)
        history.append(rec)
        log.info("epoch %d loss %.4f val %s", epoch, rec.train_loss, val)
        if callback is not None:
            callback(rec)
    return history


# ---------------------------------------------------------------------------
# checkpoints and datasets

FORMAT_VERSION = 1


def save_checkpoint(model: CorrectorModel, path, extra: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "corrector",
        "config": {**asdict(model.spec), "n_in": model.n_in, **(extra or {})},
        "params": {k: format_tensor(v) for k, v in model.params().items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[CorrectorModel, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "corrector":
        raise ValueError(f"{path}: not a corrector checkpoint of format {FORMAT_VERSION}")
    cfg = doc["config"]
    spec = ArchitectureSpec(
        cfg["name"], tuple(cfg["units"]), tuple(cfg["dropout"]), cfg["peepholes"], cfg["learn_init"]
    )
    model = CorrectorModel.init(spec, 0, cfg.get("n_in", N_CLASSES))
    params = model.params()
    for name, text in doc["params"].items():
        if name not in params:
            raise ValueError(f"{path}: unexpected parameter {name!r}")
        value = parse_tensor(text)
        if value.shape != params[name].shape:
            raise ShapeError(f"{path}: parameter {name!r} has shape {value.shape}, expected {params[name].shape}")
        params[name][...] = value
    return model, cfg


@dataclass
class PaddedPair:
    word: str
    target: np.ndarray  # 24 class indices
    probmap: np.ndarray  # 23 x 37


def pair_to_json(pair: PaddedPair) -> str:
    return json.dumps(
        {
            "word": pair.word,
            "target_indices": [int(i) for i in pair.target],
            "probmap": [[float(v) for v in row] for row in pair.probmap],
        },
        separators=(",", ":"),
    )


def read_dataset(path) -> list[PaddedPair]:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pair = PaddedPair(
                    rec["word"],
                    np.asarray(rec["target_indices"], dtype=np.int64),
                    np.asarray(rec["probmap"], dtype=np.float64),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record ({exc})") from None
            if pair.target.shape != (N_STEPS,) or pair.probmap.shape != (FRAME_LENGTH, N_CLASSES):
                raise ShapeError(f"{path}:{lineno}: record has wrong geometry")
            pairs.append(pair)
    return pairs


def write_dataset(path, pairs) -> None:
    with open(path, "w") as fh:
        for pair in pairs:
            fh.write(pair_to_json(pair) + "\n")


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if not pairs:
        return np.zeros((0, FRAME_LENGTH, N_CLASSES)), np.zeros((0, N_STEPS), dtype=np.int64), []
    maps = np.stack([p.probmap for p in pairs])
    targets = np.stack([p.target for p in pairs])
    return maps, targets, [p.word for p in pairs]


# ---------------------------------------------------------------------------
# estimator

class SequenceCorrector(BaseEstimator):
    """Estimator wrapper: ``fit(maps, words)``, ``predict(maps) -> words``.

    ``maps`` is ``n x 23 x 37``; ``words`` are strings, encoded with
    :func:`encode_target` at ``context_min``.
    """

    def __init__(
        self,
        arch=DEFAULT_ARCH,
        learning_rate=RECIPE_LR,
        momentum=0.9,
        batch_size=RECIPE_BATCH,
        n_epochs=RECIPE_EPOCHS,
        clip_norm=RECIPE_CLIP,
        context_min=DEFAULT_CONTEXT,
        onehot_inputs=False,
        random_state=0,
    ):
        self.arch = arch
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.clip_norm = clip_norm
        self.context_min = context_min
        self.onehot_inputs = onehot_inputs
        self.random_state = random_state

    def _check_maps(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1:] != (FRAME_LENGTH, N_CLASSES):
            raise ShapeError(f"expected n x {FRAME_LENGTH} x {N_CLASSES} maps, got shape {X.shape}")
        check_probability_rows(X, "maps")
        return onehot_maps(X) if self.onehot_inputs else X

    def fit(self, X, y, validation=None):
        X = self._check_maps(X)
        targets = np.stack([encode_target(w, context_min=self.context_min) for w in y])
        spec = self.arch if isinstance(self.arch, ArchitectureSpec) else get_architecture(self.arch)
        self.model_ = CorrectorModel.init(spec, self.random_state)
        hyper = TrainingHyper(self.learning_rate, self.momentum, self.batch_size)
        val = None
        if validation is not None:
            Xv, yv = validation
            val = (self._check_maps(Xv), np.stack([encode_target(w, context_min=self.context_min) for w in yv]))
        self.history_ = train_corrector(self.model_, X, targets, hyper, self.n_epochs, self.random_state, val,
                                        clip_norm=self.clip_norm)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self)
        return corrector_forward(self.model_, self._check_maps(X))

    def predict(self, X) -> list[str]:
        return [decode_output(row) for row in self.predict_proba(X).argmax(axis=-1)]

    def score(self, X, y) -> float:
        """Fraction of inputs whose decoded word equals the target word."""
        pred = self.predict(X)
        return float(np.mean([p == normalize_word(w) for p, w in zip(pred, y)]))
