"""Recurrent layers with hand-derived backpropagation through time.

* :class:`RnnCell` -- tanh recurrence with a softmax readout per step.
* :class:`LstmBlock` -- one-cell memory blocks with input/forget/output gates,
  optional peephole connections and optionally trainable initial state.
* :class:`BlstmLayer` -- a forward and a backward block whose hidden states
  are concatenated per timestep.

LSTM sequences are ``T x B x D`` arrays (a ``T x D`` array is a batch of one).
Gate pre-activations are packed ``[input, forget, output, candidate]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ._validation import ShapeError
from .classify import cross_entropy, sigmoid, softmax

INIT_SCALE = 0.08


def _uniform(rng: np.random.Generator, *shape: int, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


# ---------------------------------------------------------------------------
# vanilla RNN

@dataclass
class RnnCell:
    U: np.ndarray  # hidden x input
    W: np.ndarray  # hidden x hidden
    V: np.ndarray  # output x hidden
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        h = self.W.shape[0]
        if self.W.shape != (h, h) or self.U.shape[0] != h or self.V.shape[1] != h:
            raise ShapeError("RnnCell: inconsistent U/W/V extents")
        if self.b.shape != (h,) or self.c.shape != (self.V.shape[0],):
            raise ShapeError("RnnCell: bias extents do not match")

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng=None) -> "RnnCell":
        rng = np.random.default_rng(rng)
        return cls(
            U=_uniform(rng, n_hidden, n_in),
            W=_uniform(rng, n_hidden, n_hidden),
            V=_uniform(rng, n_out, n_hidden),
            b=np.zeros(n_hidden),
            c=np.zeros(n_out),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "W": self.W, "V": self.V, "b": self.b, "c": self.c}


@dataclass
class RnnTrace:
    x: np.ndarray
    states: np.ndarray  # (T + 1) x H, row 0 is the zero initial state
    probs: np.ndarray

    def __len__(self):
        return len(self.x)


def rnn_forward(cell: RnnCell, x_seq) -> tuple[np.ndarray, RnnTrace]:
    """``a_t = b + W s_{t-1} + U x_t``, ``s_t = tanh(a_t)``, ``p_t = softmax(c + V s_t)``."""
    x = np.asarray(x_seq, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ShapeError(f"x_seq must be a nonempty T x D array, got shape {x.shape}")
    if x.shape[1] != cell.U.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} != cell input width {cell.U.shape[1]}")
    T, H = len(x), cell.W.shape[0]
    states = np.zeros((T + 1, H))
    for t in range(T):
        states[t + 1] = np.tanh(cell.b + cell.W @ states[t] + cell.U @ x[t])
    probs = softmax(states[1:] @ cell.V.T + cell.c)
    return probs, RnnTrace(x, states, probs)


def rnn_bptt(cell: RnnCell, x_seq, y_seq) -> tuple[dict[str, np.ndarray], float]:
    """Gradients of ``L = sum_t -log p_t[y_t]`` for every parameter of ``cell``."""
    y = np.asarray(y_seq, dtype=np.int64)
    probs, trace = rnn_forward(cell, x_seq)
    if len(y) != len(probs):
        raise ShapeError(f"{len(y)} targets for {len(probs)} timesteps")
    T = len(y)
    onehot = np.eye(probs.shape[1])[y]
    loss = float(cross_entropy(probs, onehot).sum())
    d_o = probs - onehot
    s = trace.states
    grads = {k: np.zeros_like(v) for k, v in cell.params().items()}
    grads["c"] = d_o.sum(axis=0)
    grads["V"] = d_o.T @ s[1:]
    ds_next = np.zeros(cell.W.shape[0])
    for t in range(T - 1, -1, -1):
        ds = cell.V.T @ d_o[t] + ds_next
        da = ds * (1.0 - s[t + 1] ** 2)
        grads["b"] += da
        grads["W"] += np.outer(da, s[t])
        grads["U"] += np.outer(da, trace.x[t])
        ds_next = cell.W.T @ da
    return grads, loss


# ---------------------------------------------------------------------------
# LSTM

@dataclass
class LstmBlock:
    W_x: np.ndarray  # input x 4H
    W_h: np.ndarray  # H x 4H
    b: np.ndarray  # 4H
    peep: np.ndarray | None = None  # 3 x H: input, forget, output
    h0: np.ndarray | None = None
    c0: np.ndarray | None = None
    learn_init: bool = False

    def __post_init__(self):
        H = self.units
        if self.W_h.shape != (H, 4 * H) or self.b.shape != (4 * H,):
            raise ShapeError("LstmBlock: W_x, W_h and b extents disagree")
        if self.peep is not None and self.peep.shape != (3, H):
            raise ShapeError(f"LstmBlock: peepholes must be 3 x {H}")
        if self.h0 is None:
            self.h0 = np.zeros(H)
        if self.c0 is None:
            self.c0 = np.zeros(H)

    @property
    def units(self) -> int:
        return self.W_x.shape[1] // 4

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[0]

    @classmethod
    def init(cls, n_in: int, units: int, rng=None, peepholes: bool = True, learn_init: bool = False,
             scale: float = INIT_SCALE, forget_bias: float = 0.0):
        rng = np.random.default_rng(rng)
        b = np.zeros(4 * units)
        b[units:2 * units] = forget_bias
        return cls(
            W_x=_uniform(rng, n_in, 4 * units, scale=scale),
            W_h=_uniform(rng, units, 4 * units, scale=scale),
            b=b,
            peep=_uniform(rng, 3, units, scale=scale) if peepholes else None,
            learn_init=learn_init,
        )

    def params(self) -> dict[str, np.ndarray]:
        p = {"W_x": self.W_x, "W_h": self.W_h, "b": self.b}
        if self.peep is not None:
            p["peep"] = self.peep
        if self.learn_init:
            p["h0"] = self.h0
            p["c0"] = self.c0
        return p


@dataclass
class LstmTrace:
    x: np.ndarray  # T x B x D
    gates: np.ndarray  # T x B x 4H, post-nonlinearity
    cells: np.ndarray  # (T + 1) x B x H, row 0 = initial cell
    hidden: np.ndarray  # (T + 1) x B x H
    tanh_cells: np.ndarray  # T x B x H


@dataclass
class _Scan:
    """Traces of ``K`` blocks run side by side; block axis after time (before batch for ``x``)."""

    x: np.ndarray  # K x T x B x D
    gates: np.ndarray  # T x K x B x 4H
    cells: np.ndarray  # (T + 1) x K x B x H
    hidden: np.ndarray  # (T + 1) x K x B x H
    tanh_cells: np.ndarray  # T x K x B x H

    def block(self, k: int) -> LstmTrace:
        return LstmTrace(self.x[k], self.gates[:, k], self.cells[:, k], self.hidden[:, k], self.tanh_cells[:, k])

    @classmethod
    def single(cls, trace: LstmTrace) -> "_Scan":
        return cls(trace.x[None], trace.gates[:, None], trace.cells[:, None], trace.hidden[:, None],
                   trace.tanh_cells[:, None])


def _as_sequence(x_seq, width: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x_seq, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, None, :]
    if x.ndim != 3 or x.shape[0] == 0:
        raise ShapeError(f"expected a nonempty T x B x D sequence, got shape {x.shape}")
    if x.shape[2] != width:
        raise ShapeError(f"input width {x.shape[2]} != block input width {width}")
    return x, squeeze


def _stack(blocks, name):
    return np.stack([getattr(b, name) for b in blocks])


def _scan_forward(blocks, x: np.ndarray) -> _Scan:
    """Run equally sized blocks in lockstep; ``x`` is ``K x T x B x D``, one sequence per block."""
    K, T, B, D = x.shape
    H = blocks[0].units
    W_x, W_h, b = _stack(blocks, "W_x"), _stack(blocks, "W_h"), _stack(blocks, "b")
    peep = None if blocks[0].peep is None else _stack(blocks, "peep")  # K x 3 x H
    pre_x = np.matmul(x.reshape(K, T * B, D), W_x).reshape(K, T, B, 4 * H)
    pre_x = np.ascontiguousarray(pre_x.transpose(1, 0, 2, 3)) + b[:, None, :]
    gates = np.empty((T, K, B, 4 * H))
    cells = np.empty((T + 1, K, B, H))
    hidden = np.empty((T + 1, K, B, H))
    tanh_cells = np.empty((T, K, B, H))
    cells[0] = _stack(blocks, "c0")[:, None, :]
    hidden[0] = _stack(blocks, "h0")[:, None, :]
    if peep is not None:
        peep_if = peep[:, None, :2, :]  # K x 1 x 2 x H
        peep_o = peep[:, None, 2, :]
    for t in range(T):
        a = pre_x[t]
        a += np.matmul(hidden[t], W_h)
        c_prev = cells[t]
        if peep is not None:
            a[..., :2 * H].reshape(K, B, 2, H)[...] += peep_if * c_prev[:, :, None, :]
        gt = gates[t]
        expit(a[..., :2 * H], out=gt[..., :2 * H])
        np.tanh(a[..., 3 * H:], out=gt[..., 3 * H:])
        c = cells[t + 1]
        np.multiply(gt[..., H:2 * H], c_prev, out=c)
        c += gt[..., :H] * gt[..., 3 * H:]
        a_o = a[..., 2 * H:3 * H]
        if peep is not None:
            a_o += peep_o * c
        expit(a_o, out=gt[..., 2 * H:3 * H])
        np.tanh(c, out=tanh_cells[t])
        np.multiply(gt[..., 2 * H:3 * H], tanh_cells[t], out=hidden[t + 1])
    return _Scan(x, gates, cells, hidden, tanh_cells)


def _scan_backward(blocks, scan: _Scan, dh_up: np.ndarray) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
    """Gradients for every block from ``dL/dh`` (``T x K x B x H``); returns per-block dicts and ``dx``."""
    T, K, B, H = scan.tanh_cells.shape
    D = scan.x.shape[-1]
    W_x, W_h = _stack(blocks, "W_x"), _stack(blocks, "W_h")
    peep = None if blocks[0].peep is None else _stack(blocks, "peep")
    gates = scan.gates
    # sigmoid'/tanh' of every gate, computed once for the whole sequence
    deriv = gates * (1.0 - gates)
    deriv[..., 3 * H:] = 1.0 - gates[..., 3 * H:] ** 2
    dpre = np.empty((T, K, B, 4 * H))
    W_hT = W_h.transpose(0, 2, 1)
    dh = np.zeros((K, B, H))
    dc_next = np.zeros((K, B, H))
    if peep is not None:
        p_i, p_f, p_o = (peep[:, None, j, :] for j in range(3))
    for t in range(T - 1, -1, -1):
        gt = gates[t]
        dt = deriv[t]
        d = dpre[t]
        tc = scan.tanh_cells[t]
        dh += dh_up[t]
        # output gate
        np.multiply(dh, tc, out=d[..., 2 * H:3 * H])
        d[..., 2 * H:3 * H] *= dt[..., 2 * H:3 * H]
        dc = dh * gt[..., 2 * H:3 * H]
        dc *= 1.0 - tc * tc
        dc += dc_next
        if peep is not None:
            dc += d[..., 2 * H:3 * H] * p_o
        # input gate, forget gate, candidate
        np.multiply(dc, gt[..., 3 * H:], out=d[..., :H])
        np.multiply(dc, scan.cells[t], out=d[..., H:2 * H])
        np.multiply(dc, gt[..., :H], out=d[..., 3 * H:])
        d[..., :H] *= dt[..., :H]
        d[..., H:2 * H] *= dt[..., H:2 * H]
        d[..., 3 * H:] *= dt[..., 3 * H:]
        dc_next = dc * gt[..., H:2 * H]
        if peep is not None:
            dc_next += d[..., :H] * p_i
            dc_next += d[..., H:2 * H] * p_f
        dh = np.matmul(d, W_hT)
    flat = np.ascontiguousarray(dpre.transpose(1, 0, 2, 3)).reshape(K, T * B, 4 * H)
    hid = np.ascontiguousarray(scan.hidden[:-1].transpose(1, 0, 2, 3)).reshape(K, T * B, H)
    gW_x = np.matmul(scan.x.reshape(K, T * B, D).transpose(0, 2, 1), flat)
    gW_h = np.matmul(hid.transpose(0, 2, 1), flat)
    gb = flat.sum(axis=1)
    if peep is not None:
        cells_prev = scan.cells[:-1]
        gpeep = np.stack([
            np.einsum("tkbh,tkbh->kh", dpre[..., :H], cells_prev),
            np.einsum("tkbh,tkbh->kh", dpre[..., H:2 * H], cells_prev),
            np.einsum("tkbh,tkbh->kh", dpre[..., 2 * H:3 * H], scan.cells[1:]),
        ], axis=1)
    out = []
    for k, block in enumerate(blocks):
        g = {"W_x": gW_x[k], "W_h": gW_h[k], "b": gb[k]}
        if peep is not None:
            g["peep"] = gpeep[k]
        if block.learn_init:
            g["h0"] = dh[k].sum(axis=0)
            g["c0"] = dc_next[k].sum(axis=0)
        out.append(g)
    dx = np.matmul(flat, W_x.transpose(0, 2, 1)).reshape(K, T, B, D)
    return out, dx


def lstm_forward(block: LstmBlock, x_seq) -> tuple[np.ndarray, LstmTrace]:
    """Run the block over a sequence; returns hidden states ``T x B x H``.

    ``c_t = f_t * c_{t-1} + i_t * g_t`` and ``h_t = o_t * tanh(c_t)``; with
    peepholes the input and forget gates see ``c_{t-1}``, the output gate ``c_t``.
    """
    x, squeeze = _as_sequence(x_seq, block.input_dim)
    trace = _scan_forward([block], x[None]).block(0)
    out = trace.hidden[1:]
    return (out[:, 0] if squeeze else out), trace


def lstm_bptt(block: LstmBlock, trace: LstmTrace | None, grad_hidden) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate ``dL/dh_t`` through the block.

    Returns the parameter gradients (keys as in :meth:`LstmBlock.params`) and
    the gradient with respect to the input sequence.
    """
    if trace is None:
        raise ValueError("lstm_bptt needs the trace recorded by lstm_forward")
    dh_up = np.asarray(grad_hidden, dtype=np.float64)
    squeeze = dh_up.ndim == 2
    if squeeze:
        dh_up = dh_up[:, None, :]
    T, B, H = trace.tanh_cells.shape
    if dh_up.shape != (T, B, H):
        raise ShapeError(f"grad_hidden shape {dh_up.shape} != {(T, B, H)}")
    (grads,), dx = _scan_backward([block], _Scan.single(trace), dh_up[:, None])
    return grads, (dx[0, :, 0] if squeeze else dx[0])


# ---------------------------------------------------------------------------
# bidirectional

@dataclass
class BlstmLayer:
    forward: LstmBlock
    backward: LstmBlock

    def __post_init__(self):
        if self.forward.units != self.backward.units or self.forward.input_dim != self.backward.input_dim:
            raise ShapeError("BlstmLayer: forward and backward blocks must have equal extents")

    @property
    def units(self) -> int:
        return self.forward.units

    @property
    def output_dim(self) -> int:
        return 2 * self.forward.units

    @classmethod
    def init(cls, n_in: int, units: int, rng=None, peepholes: bool = True, learn_init: bool = False,
             scale: float = INIT_SCALE, forget_bias: float = 0.0):
        rng = np.random.default_rng(rng)
        return cls(
            LstmBlock.init(n_in, units, rng, peepholes, learn_init, scale, forget_bias),
            LstmBlock.init(n_in, units, rng, peepholes, learn_init, scale, forget_bias),
        )

    def params(self) -> dict[str, np.ndarray]:
        p = {f"fwd.{k}": v for k, v in self.forward.params().items()}
        p.update({f"bwd.{k}": v for k, v in self.backward.params().items()})
        return p


@dataclass
class BlstmTrace:
    scan: _Scan  # block 0 = forward, block 1 = backward (on the reversed sequence)

    @property
    def forward(self) -> LstmTrace:
        return self.scan.block(0)

    @property
    def backward(self) -> LstmTrace:
        return self.scan.block(1)


def blstm_forward(layer: BlstmLayer, x_seq) -> tuple[np.ndarray, BlstmTrace]:
    """``out_t = [h_fwd_t, h_bwd_t]``; the backward block reads the reversed sequence."""
    x, squeeze = _as_sequence(x_seq, layer.forward.input_dim)
    scan = _scan_forward([layer.forward, layer.backward], np.stack([x, x[::-1]]))
    h = scan.hidden[1:]
    out = np.concatenate([h[:, 0], h[::-1, 1]], axis=-1)
    return (out[:, 0] if squeeze else out), BlstmTrace(scan)


def blstm_bptt(layer: BlstmLayer, trace: BlstmTrace, grad_out) -> tuple[dict[str, np.ndarray], np.ndarray]:
    g = np.asarray(grad_out, dtype=np.float64)
    squeeze = g.ndim == 2
    if squeeze:
        g = g[:, None, :]
    H = layer.units
    dh = np.stack([g[..., :H], g[::-1, :, H:]], axis=1)
    (gf, gb), dx = _scan_backward([layer.forward, layer.backward], trace.scan, dh)
    grads = {f"fwd.{k}": v for k, v in gf.items()}
    grads.update({f"bwd.{k}": v for k, v in gb.items()})
    dx = dx[0] + dx[1, ::-1]
    return grads, (dx[:, 0] if squeeze else dx)


# ---------------------------------------------------------------------------
# dropout

def dropout_mask(shape, p: float, rng) -> np.ndarray:
    """Inverted-dropout mask: zeros with probability ``p``, survivors scaled by ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    rng = np.random.default_rng(rng)
    if p == 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout(x_seq, p: float, mode: str = "train", seed=None) -> np.ndarray:
    """Inverted dropout; ``mode="infer"`` returns the input unchanged."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x_seq, dtype=np.float64)
    if mode == "infer" or p == 0:
        return x.copy()
    return x * dropout_mask(x.shape, p, seed)
