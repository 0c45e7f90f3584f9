"""Dense layer primitives on float64 numpy arrays.

Spatial tensors are laid out ``H x W x C`` (single image) or ``N x H x W x C``
(batch); kernels are ``k x k x C x F``. Only "valid" geometry is supported.

The convolution computes ``s[i, j] = sum_m sum_n I[i*s + m, j*s + n] K[m, n]``,
i.e. cross-correlation: the kernel is not flipped.
"""

from __future__ import annotations

from numpy.lib.stride_tricks import sliding_window_view
import numpy as np

from ._validation import GeometryError, ShapeError, as_float_array

__all__ = [
    "output_extent",
    "conv2d",
    "conv2d_backward",
    "max_pool",
    "max_pool_backward",
    "avg_pool",
    "avg_pool_backward",
    "affine",
    "affine_backward",
    "format_tensor",
    "parse_tensor",
    "format_pfmap",
    "parse_pfmap",
]


def output_extent(n: int, f: int, s: int = 1) -> int:
    """Extent of a valid convolution/pool output: ``(n - f) / s + 1``.

    Raises GeometryError when the window does not fit or the stride does not
    tile the input exactly.
    """
    if f < 1 or s < 1:
        raise GeometryError(f"kernel extent and stride must be >= 1, got f={f}, s={s}")
    if n < f:
        raise GeometryError(f"kernel extent {f} exceeds input extent {n}")
    if (n - f) % s:
        raise GeometryError(f"stride {s} does not tile input {n} with kernel {f}")
    return (n - f) // s + 1


def _batched(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    x = as_float_array(x, name)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name}: expected H x W x C or N x H x W x C, got shape {x.shape}")


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of shape N x H' x W' x C x k x k."""
    _, h, w, _ = x.shape
    output_extent(h, k, stride)
    output_extent(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x, kernels, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of ``x`` with a bank of ``F`` kernels."""
    xb, single = _batched(x, "input")
    kernels = as_float_array(kernels, "kernels", ndim=4)
    k, k2, c, _ = kernels.shape
    if k != k2:
        raise ShapeError(f"kernels must be square, got {kernels.shape[:2]}")
    if c != xb.shape[3]:
        raise ShapeError(f"kernel channels {c} != input channels {xb.shape[3]}")
    win = _windows(xb, k, stride)
    # win axes: n h w c i j ; kernels: i j c f
    out = np.tensordot(win, kernels.transpose(2, 0, 1, 3), axes=([3, 4, 5], [0, 1, 2]))
    return out[0] if single else out


def conv2d_backward(x, kernels, grad_out, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. the conv input and kernels."""
    xb, single = _batched(x, "input")
    kernels = np.asarray(kernels, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[None]
    k = kernels.shape[0]
    win = _windows(xb, k, stride)
    oh, ow = g.shape[1], g.shape[2]
    if win.shape[1:3] != (oh, ow) or g.shape[3] != kernels.shape[3]:
        raise ShapeError(f"grad_out shape {g.shape} does not match conv output")
    # dK[i,j,c,f] = sum_{n,h,w} win[n,h,w,c,i,j] g[n,h,w,f]
    dk = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    dx = np.zeros_like(xb)
    span_h = stride * (oh - 1) + 1
    span_w = stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            dx[:, i:i + span_h:stride, j:j + span_w:stride, :] += g @ kernels[i, j].T
    return (dx[0] if single else dx), dk


def _pool_windows(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    win = _windows(x, window, stride)
    n, oh, ow, c = win.shape[:4]
    return win.reshape(n, oh, ow, c, window * window)


def max_pool(x, window: int, stride: int | None = None, return_indices: bool = False):
    """Max over each ``window x window`` patch, per channel.

    With ``return_indices`` also returns the flat in-window argmax (first
    maximum wins) needed by :func:`max_pool_backward`.
    """
    stride = window if stride is None else stride
    xb, single = _batched(x, "input")
    flat = _pool_windows(xb, window, stride)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if single:
        out, idx = out[0], idx[0]
    return (out, idx) if return_indices else out


def max_pool_backward(grad_out, indices, input_shape, window: int, stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    g = np.asarray(grad_out, dtype=np.float64)
    single = len(input_shape) == 3
    if single:
        g, indices, input_shape = g[None], indices[None], (1, *input_shape)
    dx = np.zeros(input_shape)
    oh, ow = g.shape[1], g.shape[2]
    di, dj = np.divmod(indices, window)
    n_idx, h_idx, w_idx, c_idx = np.indices(g.shape)
    rows = h_idx * stride + di
    cols = w_idx * stride + dj
    np.add.at(dx, (n_idx, rows, cols, c_idx), g)
    return dx[0] if single else dx


def avg_pool(x, window: int, stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    xb, single = _batched(x, "input")
    out = _pool_windows(xb, window, stride).mean(axis=-1)
    return out[0] if single else out


def avg_pool_backward(grad_out, input_shape, window: int, stride: int | None = None) -> np.ndarray:
    stride = window if stride is None else stride
    g = np.asarray(grad_out, dtype=np.float64)
    single = len(input_shape) == 3
    if single:
        g, input_shape = g[None], (1, *input_shape)
    dx = np.zeros(input_shape)
    oh, ow = g.shape[1], g.shape[2]
    share = g / (window * window)
    span_h = stride * (oh - 1) + 1
    span_w = stride * (ow - 1) + 1
    for i in range(window):
        for j in range(window):
            dx[:, i:i + span_h:stride, j:j + span_w:stride, :] += share
    return dx[0] if single else dx


def affine(x, W, b) -> np.ndarray:
    """``W @ x + b`` for a vector ``x``, or row-wise ``x @ W.T + b`` for a batch."""
    x = as_float_array(x, "x")
    W = as_float_array(W, "W", ndim=2)
    b = as_float_array(b, "b", ndim=1)
    if x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise ShapeError(f"affine: x {x.shape}, W {W.shape}, b {b.shape} are incompatible")
    return x @ W.T + b


def affine_backward(x, W, grad_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(dx, dW, db)``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    dx = g @ W
    if x.ndim == 1:
        return dx, np.outer(g, x), g.copy()
    return dx, g.T @ x, g.sum(axis=0)


# ---------------------------------------------------------------------------
# text formats

def format_tensor(arr) -> str:
    """``TENSOR <ndim> <extent...>`` header, then row-major values (round-trippable)."""
    a = np.asarray(arr, dtype=np.float64)
    header = " ".join(["TENSOR", str(a.ndim), *map(str, a.shape)])
    return header + "\n" + " ".join(repr(float(v)) for v in a.ravel()) + "\n"


def parse_tensor(text: str) -> np.ndarray:
    tokens = text.split()
    if not tokens or tokens[0] != "TENSOR":
        raise ValueError("tensor text must start with 'TENSOR'")
    ndim = int(tokens[1])
    shape = tuple(int(t) for t in tokens[2:2 + ndim])
    values = _finite_values(tokens[2 + ndim:], "tensor text")
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"tensor text: {values.size} values for shape {shape}")
    return values.reshape(shape)


def _finite_values(tokens, what: str) -> np.ndarray:
    values = np.array(tokens, dtype=np.float64) if tokens else np.zeros(0)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what}: non-finite value")
    return values


def format_pfmap(grid) -> str:
    """Portable float map: ``PFMAP h w`` then ``h`` lines of ``w`` values."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim == 3 and g.shape[2] == 1:
        g = g[..., 0]
    if g.ndim != 2:
        raise ShapeError(f"PFMAP holds a single 2-d grid, got shape {g.shape}")
    lines = [f"PFMAP {g.shape[0]} {g.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in g]
    return "\n".join(lines) + "\n"


def parse_pfmap(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) < 3 or tokens[0] != "PFMAP":
        raise ValueError("float map must start with 'PFMAP h w'")
    h, w = int(tokens[1]), int(tokens[2])
    values = _finite_values(tokens[3:], "PFMAP")
    if values.size != h * w:
        raise ShapeError(f"PFMAP: expected {h * w} values, found {values.size}")
    return values.reshape(h, w)
