"""Differentiable tensor operations (forward + backward) on float64 arrays.

Every public function takes/returns :class:`mgunet.tensor.Tensor` and records
itself on the active tape.  Convolution is cross-correlation (no kernel flip)
computed via im2col and BLAS matmul; the column matrix is recomputed in the
backward pass instead of being saved, which keeps memory bounded.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, record

__all__ = [
    "relu", "add", "sub", "mul", "div", "scalar_mul", "scalar_add",
    "log", "clamp_min", "reduce_sum", "reduce_mean", "reshape", "transpose2d",
    "concat_channels", "slice_channels", "matmul", "conv2d", "max_pool2d",
    "avg_pool2d", "bilinear_upsample", "softmax_channels", "channel_norm",
    "pad_replicate",
]


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise DimensionError(f"expected an int pair, got {v}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        return (g * (x.data > 0.0),)

    return record("relu", (x,), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(g):
        return g, g

    return record("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(g):
        return g, -g

    return record("sub", (a, b), a.data - b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bwd(g):
        return g * b.data, g * a.data

    return record("mul", (a, b), a.data * b.data, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        return ga, -ga * out

    return record("div", (a, b), out, bwd)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * c,)

    return record("scalar_mul", (x,), x.data * c, bwd)


def scalar_add(x: Tensor, c: float) -> Tensor:
    def bwd(g):
        return (g,)

    return record("scalar_add", (x,), x.data + float(c), bwd)


def log(x: Tensor) -> Tensor:
    def bwd(g):
        return (g / x.data,)

    return record("log", (x,), np.log(x.data), bwd)


def clamp_min(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return (g * (x.data > c),)

    return record("clamp_min", (x,), np.maximum(x.data, c), bwd)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gk = g
        if not keepdims and axis is not None:
            shape = list(x.data.shape)
            for a in axis:
                shape[a] = 1
            gk = g.reshape(shape)
        return (np.broadcast_to(gk, x.data.shape),)

    return record("reduce_sum", (x,), out, bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    if axis is None:
        count = x.data.size
    else:
        count = 1
        for a in axis:
            count *= x.data.shape[a]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        gk = g
        if not keepdims and axis is not None:
            shape = list(x.data.shape)
            for a in axis:
                shape[a] = 1
            gk = g.reshape(shape)
        return (np.broadcast_to(gk, x.data.shape) / count,)

    return record("reduce_mean", (x,), out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return record("reshape", (x,), out, bwd)


def transpose2d(x: Tensor) -> Tensor:
    """Swap the last two axes (batched transpose for ndim >= 2)."""
    if x.ndim < 2:
        raise DimensionError("transpose2d requires ndim >= 2")

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return record("transpose2d", (x,), np.swapaxes(x.data, -1, -2), bwd)


def concat_channels(tensors) -> Tensor:
    """Concatenate [N,C_i,H,W] tensors along the channel axis."""
    tensors = list(tensors)
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != ref[0] or s[2:] != ref[2:]:
            raise DimensionError(f"concat_channels: incompatible shapes {ref} vs {s}")
    sizes = [t.data.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return record("concat_channels", tuple(tensors), out, bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.data.shape[1]):
        raise DimensionError(f"slice_channels: [{start}:{stop}] out of range for C={x.data.shape[1]}")
    out = x.data[:, start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record("slice_channels", (x,), out, bwd)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k) @ (k,n); either side may carry one leading batch dimension."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul supports 2-D/3-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner dims {a.data.shape} vs {b.data.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"matmul: batch dims {a.data.shape[0]} vs {b.data.shape[0]}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if ga.ndim > a.ndim:
            ga = ga.sum(axis=0)
        if gb.ndim > b.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return record("matmul", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, sh, sw, hout, wout):
    n, c = xp.shape[:2]
    cols = np.empty((n, hout, wout, c, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw].transpose(0, 2, 3, 1)
    return cols.reshape(n * hout * wout, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw] plus bias."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/weight, got {x.data.shape} / {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if b.data.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.data.shape} != ({cout},)")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise DimensionError("conv2d: stride must be positive, padding non-negative")
    if kh > h + 2 * ph or kw > wd + 2 * pw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{wd + 2 * pw}")
    hout = (h + 2 * ph - kh) // sh + 1
    wout = (wd + 2 * pw - kw) // sw + 1

    if kh == 1 and kw == 1 and (sh, sw) == (1, 1) and (ph, pw) == (0, 0):
        # 1x1 conv: pure channel mixing, skip im2col
        x_mat = x.data.reshape(n, cin, h * wd)
        w_mat = w.data.reshape(cout, cin)
        out = np.matmul(w_mat, x_mat) + b.data[:, None]

        def bwd_1x1(g):
            g_mat = g.reshape(n, cout, h * wd)
            gw = np.matmul(g_mat, x_mat.transpose(0, 2, 1)).sum(axis=0).reshape(w.data.shape) \
                if w.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
            gx = np.matmul(w_mat.T, g_mat).reshape(x.data.shape) if x.requires_grad else None
            return gx, gw, gb

        return record("conv2d", (x, w, b), out.reshape(n, cout, h, wd), bwd_1x1)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, hout, wout)
    w_mat = w.data.reshape(cout, cin * kh * kw)
    out = cols @ w_mat.T
    out += b.data
    out = out.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        g_mat = g.transpose(0, 2, 3, 1).reshape(n * hout * wout, cout)
        gb = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        gw = None
        if w.requires_grad:
            xp_b = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
            cols_b = _im2col(xp_b, kh, kw, sh, sw, hout, wout)
            gw = (g_mat.T @ cols_b).reshape(w.data.shape)
        gx = None
        if x.requires_grad:
            dcols = (g_mat @ w_mat).reshape(n, hout, wout, cin, kh, kw)
            dxp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
        return gx, gw, gb

    return record("conv2d", (x, w, b), out, bwd)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_geometry(x, kernel, stride, op):
    kh, kw = _pair(kernel)
    sh, sw = _pair(kernel if stride is None else stride)
    if x.ndim != 4:
        raise DimensionError(f"{op} expects [N,C,H,W], got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h < kh or w < kw:
        raise DimensionError(f"{op}: kernel {kh}x{kw} larger than input {h}x{w}")
    if (h - kh) % sh or (w - kw) % sw:
        raise DimensionError(
            f"{op}: spatial dims {h}x{w} not divisible by stride {sh}x{sw} for kernel {kh}x{kw}")
    return kh, kw, sh, sw, n, c, h, w, (h - kh) // sh + 1, (w - kw) // sw + 1


def max_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    """Window max; gradient flows to the first (row-major) max of each window."""
    kh, kw, sh, sw, n, c, h, w, hout, wout = _pool_geometry(x, kernel, stride, "max_pool2d")
    out = np.full((n, c, hout, wout), -np.inf)
    argwin = np.zeros((n, c, hout, wout), dtype=np.int32)
    for i in range(kh):
        for j in range(kw):
            win = x.data[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw]
            better = win > out
            out = np.where(better, win, out)
            argwin = np.where(better, i * kw + j, argwin)

    def bwd(g):
        gx = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += g * (argwin == i * kw + j)
        return (gx,)

    return record("max_pool2d", (x,), out, bwd)


def avg_pool2d(x: Tensor, kernel, stride=None) -> Tensor:
    kh, kw, sh, sw, n, c, h, w, hout, wout = _pool_geometry(x, kernel, stride, "avg_pool2d")
    inv = 1.0 / (kh * kw)
    out = np.zeros((n, c, hout, wout))
    for i in range(kh):
        for j in range(kw):
            out += x.data[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw]
    out *= inv

    def bwd(g):
        gx = np.zeros_like(x.data)
        gi = g * inv
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += gi
        return (gx,)

    return record("avg_pool2d", (x,), out, bwd)


# ---------------------------------------------------------------------------
# bilinear upsampling
# ---------------------------------------------------------------------------

_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix, align-corners=false.

    Source coordinate for output i is (i + 0.5) * n_in / n_out - 0.5, clamped
    to [0, n_in - 1].
    """
    key = (n_in, n_out)
    cached = _INTERP_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        m[o, i0] += 1.0 - f
        m[o, i1] += f
    _INTERP_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of [N,C,h,w] to [N,C,out_h,out_w].

    Both directions apply the cached interpolation matrices, so the backward
    pass is the exact transpose of the forward map.
    """
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects [N,C,H,W], got {x.data.shape}")
    h, w = x.data.shape[2:]
    if out_h < h or out_w < w:
        raise DimensionError(f"bilinear_upsample: target {out_h}x{out_w} smaller than input {h}x{w}")
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def bwd(g):
        return (np.matmul(np.matmul(rh.T, g), rw),)

    return record("bilinear_upsample", (x,), out, bwd)


# ---------------------------------------------------------------------------
# softmax / normalization / padding
# ---------------------------------------------------------------------------

def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, stabilized by max subtraction."""
    if x.ndim != 4:
        raise DimensionError(f"softmax_channels expects [N,C,H,W], got {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax_channels", (x,), p, bwd)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial normalization with learned affine.

    Each (sample, channel) map is shifted/scaled to zero mean and unit
    variance over H x W, then transformed by gamma/beta of shape (C,).
    Identical behavior in training and evaluation (no running statistics).
    """
    if x.ndim != 4:
        raise DimensionError(f"channel_norm expects [N,C,H,W], got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(f"channel_norm: affine shapes {gamma.data.shape}/{beta.data.shape} != ({c},)")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            m1 = dxhat.mean(axis=(2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, dgamma, dbeta

    return record("channel_norm", (x, gamma, beta), out, bwd)


def pad_replicate(x: Tensor, pad_h, pad_w) -> Tensor:
    """Edge-replicate padding of [N,C,H,W]; pads are (top,bottom)/(left,right)."""
    pt, pb = _pair(pad_h)
    pl, pr = _pair(pad_w)
    if x.ndim != 4:
        raise DimensionError(f"pad_replicate expects [N,C,H,W], got {x.data.shape}")
    if min(pt, pb, pl, pr) < 0:
        raise DimensionError("pad_replicate: negative pad")
    h, w = x.data.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), mode="edge")

    def bwd(g):
        g = np.array(g, copy=True)
        # fold replicated columns into their source edge, then rows
        if pl:
            g[:, :, :, pl] += g[:, :, :, :pl].sum(axis=3)
        if pr:
            g[:, :, :, pl + w - 1] += g[:, :, :, pl + w:].sum(axis=3)
        g = g[:, :, :, pl:pl + w]
        if pt:
            g[:, :, pt] += g[:, :, :pt].sum(axis=2)
        if pb:
            g[:, :, pt + h - 1] += g[:, :, pt + h:].sum(axis=2)
        return (np.ascontiguousarray(g[:, :, pt:pt + h]),)

    return record("pad_replicate", (x,), out, bwd)
