"""Differentiable operations on :class:`Tensor`.

Each op computes its value with numpy and, when a tape is active, records a
closure mapping the output gradient to one gradient per input.
"""
from __future__ import annotations

import builtins
import contextlib
from collections import defaultdict

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# multiply-add accounting

_MAC_COUNTERS: list["MacCounter"] = []


class MacCounter:
    """Accumulates multiply-adds executed by convolution ops, keyed by tag."""

    def __init__(self):
        self.by_tag: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return int(builtins.sum(self.by_tag.values()))

    def add(self, tag: str | None, macs: int) -> None:
        self.by_tag[tag or "untagged"] += int(macs)


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _log_macs(tag, macs):
    for c in _MAC_COUNTERS:
        c.add(tag, macs)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    return make_result(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    # subgradient 0 at the kink; NaN inputs stay NaN so numeric failures surface
    active = x.data > 0
    return make_result(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_result(y, (x,), lambda g: (g * y * (1 - y),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    d = x.data
    y = -np.logaddexp(0, -d).astype(d.dtype)
    return make_result(y, (x,), lambda g: (g * _sigmoid(-d),))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1 / (1 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1 + e)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), bw)


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passes to ``soft`` unchanged."""
    hard = np.asarray(hard.data if isinstance(hard, Tensor) else hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")
    return make_result(hard.copy(), (soft,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(y, dtype=x.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return make_result(y, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def cast(x: Tensor, dtype) -> Tensor:
    """Change precision (float32 <-> float64); gradient is cast back."""
    return make_result(x.data.astype(dtype), (x,), lambda g: (g.astype(x.dtype),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def index(x: Tensor, key) -> Tensor:
    fancy = _is_fancy(key)

    def bw(g):
        out = np.zeros_like(x.data)
        if fancy:
            np.add.at(out, key, g)
        else:
            out[key] += g
        return (out,)

    return make_result(np.array(x.data[key]), (x,), bw)


def _is_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def pad(x: Tensor, width: int, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``width`` on each side (zero or periodic)."""
    if width == 0:
        return x
    y = _pad_np(x.data, width, mode)
    return make_result(y, (x,), lambda g: (_pad_adjoint(g, width, mode),))


def _pad_np(a, p, mode):
    cfg = [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)]
    return np.pad(a, cfg, mode="wrap" if mode == "circular" else "constant")


def _pad_adjoint(g, p, mode):
    if mode != "circular":
        return np.ascontiguousarray(g[..., p:-p, p:-p])
    H, W = g.shape[-2] - 2 * p, g.shape[-1] - 2 * p
    return _fold_periodic(g, H, W, p, p)


def _fold_periodic(g, H, W, off_h, off_w):
    """Sum a padded array back onto a periodic H×W grid; index i maps to (i - off) mod H."""
    out = np.zeros(g.shape[:-2] + (H, W), dtype=g.dtype)
    rows = (np.arange(g.shape[-2]) - off_h) % H
    cols = (np.arange(g.shape[-1]) - off_w) % W
    tmp = np.zeros(g.shape[:-2] + (H, g.shape[-1]), dtype=g.dtype)
    np.add.at(tmp, (Ellipsis, rows, slice(None)), g)
    np.add.at(out, (Ellipsis, slice(None), cols), tmp)
    return out


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    N, C = xp.shape[:2]
    cols = np.empty((N, C, k, k, Ho, Wo), dtype=xp.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx] = xp[:, :, dy : dy + stride * Ho : stride, dx : dx + stride * Wo : stride]
    return cols.reshape(N, C * k * k, Ho * Wo)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    N, C = shape[:2]
    cols = cols.reshape(N, C, k, k, Ho, Wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            out[:, :, dy : dy + stride * Ho : stride, dx : dx + stride * Wo : stride] += cols[:, :, dy, dx]
    return out


def _check_conv(x: Tensor, w: Tensor, cin_axis: int, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be N×C×H×W, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{op}: weight must be square 4-d, got shape {w.shape}")
    if x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(
            f"{op}: input has {x.shape[1]} channels (dim 1) but weight expects {w.shape[cin_axis]} (weight dim {cin_axis})"
        )


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    pad_mode: str = "zero",
    tag: str | None = None,
) -> Tensor:
    """Cross-correlation of N×Cin×H×W input with Cout×Cin×k×k weights."""
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _check_conv(x, w, 1, "conv2d")
    N, C, H, W = x.shape
    Cout, _, k, _ = w.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < k or Wp < k:
        raise ShapeError(f"conv2d: padded input {Hp}×{Wp} smaller than kernel {k}")
    Ho, Wo = (Hp - k) // stride + 1, (Wp - k) // stride + 1

    xp = _pad_np(x.data, padding, pad_mode) if padding else x.data
    cols = _im2col(xp, k, stride, Ho, Wo)
    w2 = w.data.reshape(Cout, -1)
    y = np.matmul(w2, cols).reshape(N, Cout, Ho, Wo)
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)
    _log_macs(tag, N * Cout * Ho * Wo * C * k * k)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(N, Cout, Ho * Wo)
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dxp = _col2im(dcols, (N, C, Hp, Wp), k, stride, Ho, Wo)
            dx = _pad_adjoint(dxp, padding, pad_mode) if padding else dxp
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    out = make_result(y, parents, bw)
    return reshape(out, out.shape[1:]) if squeeze else out


def deconv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
    pad_mode: str = "zero",
    tag: str | None = None,
) -> Tensor:
    """Transposed convolution; ``w`` is Cin×Cout×k×k.

    This is the exact adjoint of :func:`conv2d` with the same weight, stride
    and padding. With ``pad_mode='circular'`` the overhang wraps around.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    _check_conv(x, w, 0, "deconv2d")
    N, Cin, H, W = x.shape
    _, Cout, k, _ = w.shape
    Hf = (H - 1) * stride + k + output_padding
    Wf = (W - 1) * stride + k + output_padding
    Ho, Wo = Hf - 2 * padding, Wf - 2 * padding
    if pad_mode == "circular":
        Ho, Wo = H * stride, W * stride

    w2 = w.data.reshape(Cin, Cout * k * k)
    xf = x.data.reshape(N, Cin, H * W)
    cols = np.matmul(w2.T, xf)
    full = _col2im(cols, (N, Cout, Hf, Wf), k, stride, H, W)
    if pad_mode == "circular":
        y = _fold_periodic(full, Ho, Wo, padding, padding)
    else:
        y = full[:, :, padding : padding + Ho, padding : padding + Wo].copy()
    if b is not None:
        y += b.data.reshape(1, -1, 1, 1)
    _log_macs(tag, N * Cin * H * W * Cout * k * k)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if pad_mode == "circular":
            rows = (np.arange(Hf) - padding) % Ho
            cl = (np.arange(Wf) - padding) % Wo
            gf = g[:, :, rows][:, :, :, cl]
        else:
            gf = np.zeros((N, Cout, Hf, Wf), dtype=g.dtype)
            gf[:, :, padding : padding + Ho, padding : padding + Wo] = g
        gcols = _im2col(gf, k, stride, H, W)
        dw = np.tensordot(xf, gcols, axes=([0, 2], [0, 2])).reshape(w.shape)
        dx = np.matmul(w2, gcols).reshape(x.shape) if x.requires_grad else None
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    out = make_result(y, parents, bw)
    return reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------------------
# pooling and resampling


def _blocks(a: np.ndarray, k: int) -> np.ndarray:
    N, C, H, W = a.shape
    if H % k or W % k:
        raise ShapeError(f"pool size {k} does not divide spatial dims {H}×{W}")
    return a.reshape(N, C, H // k, k, W // k, k)


def max_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k×k max pooling; ties route the gradient to the first cell."""
    if k == 1:
        return x
    N, C, H, W = x.shape
    win = _blocks(x.data, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // k, W // k, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(N, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(x.shape),)

    return make_result(y, (x,), bw)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    if k == 1:
        return x
    y = _blocks(x.data, k).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return make_result(y.astype(x.dtype), (x,), bw)


def upsample_nearest(x: Tensor, f: int) -> Tensor:
    if f == 1:
        return x
    y = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)

    def bw(g):
        sh = g.shape[:-2] + (x.shape[-2], f, x.shape[-1], f)
        return (g.reshape(sh).sum(axis=(-3, -1)),)

    return make_result(y, (x,), bw)


def _interp_matrix(n: int, f: int, dtype) -> np.ndarray:
    """Linear interpolation weights for ×f upsampling with half-pixel centers."""
    m = np.zeros((n * f, n), dtype=np.float64)
    src = (np.arange(n * f) + 0.5) / f - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    t = src - lo
    m[np.arange(n * f), lo] += 1 - t
    m[np.arange(n * f), hi] += t
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, f: int) -> Tensor:
    if f == 1:
        return x
    H, W = x.shape[-2:]
    uh = _interp_matrix(H, f, x.dtype)
    uw = _interp_matrix(W, f, x.dtype)
    y = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g):
        return (np.matmul(np.matmul(uh.T, g), uw),)

    return make_result(y, (x,), bw)


# ---------------------------------------------------------------------------
# losses


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 d²/β inside |d| < β, |d| - 0.5β outside."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    d = pred.data - t
    ad = np.abs(d)
    inner = ad < beta
    y = np.where(inner, 0.5 * d * d / beta, ad - 0.5 * beta).astype(pred.dtype)

    def bw(g):
        return (g * np.where(inner, d / beta, np.sign(d)),)

    return make_result(y, (pred,), bw)


def binary_cross_entropy(pred: Tensor, target, eps: float = 1e-7) -> Tensor:
    """Elementwise BCE on probabilities, with predictions clamped to [eps, 1-eps]."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    p = np.clip(pred.data, eps, 1 - eps)
    y = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    live = (pred.data > eps) & (pred.data < 1 - eps)

    def bw(g):
        return (g * live * (p - t) / (p * (1 - p)),)

    return make_result(y.astype(pred.dtype), (pred,), bw)


def square_norm(x: Tensor) -> Tensor:
    """Sum of squares, the weight-decay term ‖w‖²."""
    return make_result(np.asarray(np.sum(x.data * x.data), dtype=x.dtype), (x,), lambda g: (2 * g * x.data,))


# ---------------------------------------------------------------------------
# sampling


def bilinear_sample(grid: Tensor, rows, cols) -> Tensor:
    """Sample a T×H×W grid at fractional positions.

    ``rows`` and ``cols`` are P×T arrays of cell coordinates (cell centres at
    integers) for slice t; they are clamped to the grid. Returns a P×T tensor.
    """
    if grid.ndim != 3:
        raise ShapeError(f"bilinear_sample expects T×H×W, got {grid.shape}")
    T, H, W = grid.shape
    rows = np.clip(np.asarray(rows, dtype=np.float64), 0, H - 1)
    cols = np.clip(np.asarray(cols, dtype=np.float64), 0, W - 1)
    if rows.shape != cols.shape or rows.shape[-1] != T:
        raise ShapeError(f"sample coordinates {rows.shape}/{cols.shape} do not match T={T}")
    r0 = np.minimum(np.floor(rows).astype(int), H - 2) if H > 1 else np.zeros_like(rows, dtype=int)
    c0 = np.minimum(np.floor(cols).astype(int), W - 2) if W > 1 else np.zeros_like(cols, dtype=int)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = rows - r0
    fc = cols - c0
    t = np.broadcast_to(np.arange(T), rows.shape)
    g = grid.data
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    y = w00 * g[t, r0, c0] + w01 * g[t, r0, c1] + w10 * g[t, r1, c0] + w11 * g[t, r1, c1]

    def bw(gout):
        out = np.zeros_like(g)
        gout = gout.astype(np.float64)
        for rr, cc, ww in ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11)):
            np.add.at(out, (t, rr, cc), gout * ww)
        return (out,)

    return make_result(y.astype(grid.dtype), (grid,), bw)
