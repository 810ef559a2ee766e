"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` for inputs that
need none). Binary elementwise ops broadcast numpy-style; gradients are
summed back to the input shape.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, NumericError
from .tensor import Tensor

__all__ = [
    "as_tensor", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "square",
    "abs", "sigmoid", "swish", "sum", "mean", "reshape", "transpose", "getitem",
    "concat", "stack", "pad_last", "matmul", "linear", "softmax_lastdim",
    "conv1d", "transposed_conv1d", "conv2d", "transposed_conv2d",
    "conv1d_last", "transposed_conv1d_last",
    "rotate_pairs", "frame", "overlap_add",
]


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x), elementwise."""
    s = _sigmoid(x.data)

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return Tensor._from_op(x.data * s, (x,), bw, "swish")


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return Tensor._from_op(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    scale = x.dtype.type(1.0 / n)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * scale, x.shape),)

    return Tensor._from_op(np.asarray(out), (x,), bw, "mean")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, copy=basic), (x,), bw, "getitem")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.stack([t.data for t in xs], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return Tensor._from_op(out, xs, bw, "stack")


def pad_last(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return Tensor._from_op(np.pad(x.data, widths), (x,), lambda g: (g[..., left:left + n],), "pad")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner axes differ: a[-1]={a.shape[-1]} vs b[-2]={b.shape[-2]}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b) over the last axis; w is [Dout, Din]."""
    din = w.shape[1]
    if x.shape[-1] != din:
        raise DimensionError(f"linear: input last axis {x.shape[-1]} != weight in-features {din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = (x2 @ w.data.T).reshape(lead + (w.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        return gx, gw

    y = Tensor._from_op(out, (x, w), bw, "linear")
    return y if b is None else add(y, b)


def softmax_lastdim(x: Tensor) -> Tensor:
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), bw, "softmax")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (2i, 2i+1) of the last axis by per-position angles.

    ``cos``/``sin`` have shape [L, dim/2] and broadcast over leading axes of
    ``x`` ([..., L, dim]).
    """
    if x.shape[-1] % 2:
        raise DimensionError(f"rotate_pairs needs an even last axis, got {x.shape[-1]}")

    def rot(v, c, s):
        ve, vo = v[..., 0::2], v[..., 1::2]
        out = np.empty_like(v)
        out[..., 0::2] = ve * c - vo * s
        out[..., 1::2] = ve * s + vo * c
        return out

    c = cos.astype(x.dtype, copy=False)
    s = sin.astype(x.dtype, copy=False)
    # the adjoint of a rotation is the rotation by the negated angle
    return Tensor._from_op(rot(x.data, c, s), (x,), lambda g: (rot(g, c, -s),), "rope")


# ---------------------------------------------------------------- convolutions

def _shift_sum(y: np.ndarray, length: int) -> np.ndarray:
    """out[:, t] = sum_j y[:, t + j, j] for y [Nb, Lp, K, O]."""
    k = y.shape[2]
    out = y[:, 0:length, 0, :].copy()
    for j in range(1, k):
        out += y[:, j:j + length, j, :]
    return out


def _correlate_last(x: Tensor, w: Tensor, pad_l: int, pad_r: int) -> Tensor:
    """Channels-last correlation: out[..., t, o] = sum_{i,j} xpad[..., t + j, i] * w[o, i, j].

    All K taps are evaluated in one GEMM against the stacked kernel, then
    combined by K shifted adds.
    """
    co, ci, k = w.shape
    lead, length = x.shape[:-2], x.shape[-2]
    x3 = x.data.reshape(-1, length, ci)
    nb = x3.shape[0]
    xp = np.pad(x3, ((0, 0), (pad_l, pad_r), (0, 0)))
    lp = xp.shape[1]
    lout = lp - k + 1
    if lout < 1:
        raise DimensionError(f"sequence length {length} too short for kernel {k}")
    wcat = w.data.transpose(2, 0, 1).reshape(k * co, ci)       # row j*O + o
    xp2 = xp.reshape(nb * lp, ci)
    y = (xp2 @ wcat.T).reshape(nb, lp, k, co)
    out = _shift_sum(y, lout).reshape(lead + (lout, co))

    def bw(g):
        g3 = g.reshape(nb, lout, co)
        gy = np.zeros((nb, lp, k, co), dtype=g.dtype)
        for j in range(k):
            gy[:, j:j + lout, j, :] = g3
        gy2 = gy.reshape(nb * lp, k * co)
        gw = (gy2.T @ xp2).reshape(k, co, ci).transpose(1, 2, 0) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (gy2 @ wcat).reshape(nb, lp, ci)[:, pad_l:pad_l + length].reshape(x.shape)
        return gx, gw

    return Tensor._from_op(out, (x, w), bw, "conv1d")


def _scatter_last(x: Tensor, w: Tensor, crop_l: int) -> Tensor:
    """Channels-last stride-1 transposed convolution, cropped to the input length.

    full[..., t + j, o] += x[..., t, i] * w[i, o, j]; returns full[..., crop_l:crop_l + L, :].
    """
    ci, co, k = w.shape
    lead, length = x.shape[:-2], x.shape[-2]
    x2 = x.data.reshape(-1, ci)
    nb = x2.shape[0] // length
    wcat = w.data.transpose(0, 2, 1).reshape(ci, k * co)        # column j*O + o
    y = (x2 @ wcat).reshape(nb, length, k, co)
    full = np.zeros((nb, length + k - 1, co), dtype=y.dtype)
    for j in range(k):
        full[:, j:j + length] += y[:, :, j, :]
    out = np.ascontiguousarray(full[:, crop_l:crop_l + length]).reshape(lead + (length, co))

    def bw(g):
        gfull = np.zeros((nb, length + k - 1, co), dtype=g.dtype)
        gfull[:, crop_l:crop_l + length] = g.reshape(nb, length, co)
        gy = np.empty((nb, length, k, co), dtype=g.dtype)
        for j in range(k):
            gy[:, :, j, :] = gfull[:, j:j + length]
        gy2 = gy.reshape(nb * length, k * co)
        gw = (x2.T @ gy2).reshape(ci, k, co).transpose(0, 2, 1) if w.requires_grad else None
        gx = (gy2 @ wcat.T).reshape(x.shape) if x.requires_grad else None
        return gx, gw

    return Tensor._from_op(out, (x, w), bw, "transposed_conv1d")


def conv1d_last(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """:func:`conv1d` on channels-last input x [..., L, Cin]."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"conv1d: x channel axis (-1) = {x.shape[-1]} != w axis 1 = {w.shape[1]}")
    pl, pr = _same_pads(w.shape[2])
    y = _correlate_last(x, w, pl, pr)
    return y if b is None else add(y, b)


def transposed_conv1d_last(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """:func:`transposed_conv1d` on channels-last input x [..., L, Cin]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"transposed_conv1d: x channel axis (-1) = {x.shape[-1]} != w axis 0 = {w.shape[0]}")
    y = _scatter_last(x, w, _same_pads(w.shape[2])[0])
    return y if b is None else add(y, b)


def _swap_last(x: Tensor) -> Tensor:
    nd = x.ndim
    return transpose(x, tuple(range(nd - 2)) + (nd - 1, nd - 2))


def _cols2d(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    nb, ci = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :ho, :wo]  # [Nb, I, Ho, Wo, KH, KW]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(nb * ho * wo, ci * kh * kw)


def _correlate2d(x: Tensor, w: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    co, ci, kh, kw = w.shape
    ph0, ph1, pw0, pw1 = pads
    lead, (h, wd) = x.shape[:-3], x.shape[-2:]
    x4 = x.data.reshape(-1, ci, h, wd)
    nb = x4.shape[0]
    xp = np.pad(x4, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    wm = w.data.reshape(co, -1)
    out = (_cols2d(xp, kh, kw, ho, wo) @ wm.T).reshape(nb, ho, wo, co).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out).reshape(lead + (co, ho, wo))

    def bw(g):
        g2 = g.reshape(nb, co, ho, wo).transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ _cols2d(xp, kh, kw, ho, wo)).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wm).reshape(nb, ho, wo, ci, kh, kw)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + ho, b:b + wo] += gcols[..., a, b].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph0:ph0 + h, pw0:pw0 + wd].reshape(x.shape)
        return gx, gw

    return Tensor._from_op(out, (x, w), bw, "conv2d")


def _same_pads(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def _add_channel_bias(y: Tensor, b: Tensor | None, spatial: int) -> Tensor:
    if b is None:
        return y
    return add(y, reshape(b, (b.shape[0],) + (1,) * spatial))


def _flip_io(w: Tensor) -> Tensor:
    """[Cin, Cout, *K] -> [Cout, Cin, *K] with every kernel axis reversed."""
    nd = w.ndim
    axes = (1, 0) + tuple(range(2, nd))
    flip = (slice(None), slice(None)) + (slice(None, None, -1),) * (nd - 2)

    def bw(g):
        return (g[flip].transpose(axes),)

    return Tensor._from_op(np.ascontiguousarray(w.data.transpose(axes)[flip]), (w,), bw, "flip_io")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 1-D convolution: x [..., Cin, L], w [Cout, Cin, K] -> [..., Cout, L].

    Pads floor((K-1)/2) zeros on the left and ceil((K-1)/2) on the right.
    """
    if w.ndim != 3 or x.ndim < 2:
        raise DimensionError(f"conv1d expects x [..., Cin, L] and w [Cout, Cin, K]; got {x.shape}, {w.shape}")
    if x.shape[-2] != w.shape[1]:
        raise DimensionError(f"conv1d: x channel axis (-2) = {x.shape[-2]} != w axis 1 = {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"conv1d: bias shape {b.shape} != ({w.shape[0]},)")
    return _swap_last(conv1d_last(_swap_last(x), w, b))


def transposed_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 transposed convolution, center-cropped back to the input length.

    x [..., Cin, L], w [Cin, Cout, K]. The full L+K-1 output loses
    floor((K-1)/2) frames on the left and ceil((K-1)/2) on the right.
    """
    if w.ndim != 3 or x.ndim < 2:
        raise DimensionError(f"transposed_conv1d expects x [..., Cin, L], w [Cin, Cout, K]; got {x.shape}, {w.shape}")
    if x.shape[-2] != w.shape[0]:
        raise DimensionError(f"transposed_conv1d: x channel axis (-2) = {x.shape[-2]} != w axis 0 = {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"transposed_conv1d: bias shape {b.shape} != ({w.shape[1]},)")
    return _swap_last(transposed_conv1d_last(_swap_last(x), w, b))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 2-D convolution: x [..., Cin, H, W], w [Cout, Cin, KH, KW]."""
    if w.ndim != 4 or x.ndim < 3:
        raise DimensionError(f"conv2d expects x [..., Cin, H, W], w [Cout, Cin, KH, KW]; got {x.shape}, {w.shape}")
    if x.shape[-3] != w.shape[1]:
        raise DimensionError(f"conv2d: x channel axis (-3) = {x.shape[-3]} != w axis 1 = {w.shape[1]}")
    pads = _same_pads(w.shape[2]) + _same_pads(w.shape[3])
    return _add_channel_bias(_correlate2d(x, w, pads), b, 2)


def transposed_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 transposed 2-D convolution cropped to the input size; w [Cin, Cout, KH, KW]."""
    if w.ndim != 4 or x.ndim < 3:
        raise DimensionError(f"transposed_conv2d expects x [..., Cin, H, W], w [Cin, Cout, KH, KW]; got {x.shape}, {w.shape}")
    if x.shape[-3] != w.shape[0]:
        raise DimensionError(f"transposed_conv2d: x channel axis (-3) = {x.shape[-3]} != w axis 0 = {w.shape[0]}")
    hl, hr = _same_pads(w.shape[2])
    wl, wr = _same_pads(w.shape[3])
    return _add_channel_bias(_correlate2d(x, _flip_io(w), (hr, hl, wr, wl)), b, 2)


# ---------------------------------------------------------------- framing

def _ola(frames: np.ndarray, hop: int) -> np.ndarray:
    *lead, n_frames, win = frames.shape
    r = win // hop
    fr = frames.reshape(*lead, n_frames, r, hop)
    out = np.zeros((*lead, n_frames + r - 1, hop), dtype=frames.dtype)
    for j in range(r):
        out[..., j:j + n_frames, :] += fr[..., :, j, :]
    return out.reshape(*lead, (n_frames + r - 1) * hop)


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = (x.shape[-1] - win) // hop + 1
    return np.ascontiguousarray(sliding_window_view(x, win, axis=-1)[..., ::hop, :][..., :n_frames, :])


def _check_hop(win: int, hop: int) -> None:
    if hop <= 0 or win % hop:
        raise DimensionError(f"hop {hop} must divide window {win}")


def frame(x: Tensor, win: int, hop: int) -> Tensor:
    """Slice [..., N] into [..., T, win] frames with T = (N - win) // hop + 1."""
    _check_hop(win, hop)
    if x.shape[-1] < win:
        raise DimensionError(f"signal length {x.shape[-1]} shorter than window {win}")
    n = x.shape[-1]
    fr = _frames(x.data, win, hop)
    used = (fr.shape[-2] - 1) * hop + win

    def bw(g):
        gx = _ola(g, hop)
        if used < n:
            gx = np.concatenate([gx, np.zeros(gx.shape[:-1] + (n - used,), gx.dtype)], axis=-1)
        return (gx,)

    return Tensor._from_op(fr, (x,), bw, "frame")


def overlap_add(frames: Tensor, hop: int) -> Tensor:
    """Adjoint of :func:`frame`: sum frames [..., T, win] at hop spacing."""
    win = frames.shape[-1]
    _check_hop(win, hop)
    return Tensor._from_op(_ola(frames.data, hop), (frames,), lambda g: (_frames(g, win, hop),), "overlap_add")
