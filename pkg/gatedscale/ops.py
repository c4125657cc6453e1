"""Differentiable primitives on (N, C, H, W) tensors.

Each op computes its forward value with numpy and hands a backward rule to
``tensor.record``. Conventions fixed here:

- bilinear interpolation uses half-pixel centers (align_corners=False);
- the ReLU derivative at exactly 0 is 0;
- sigmoid is evaluated in the two-branch stable form and clamped so its
  output stays strictly inside (0, 1).
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from gatedscale.errors import ShapeError
from gatedscale.params import Conv2dParams, NormParams
from gatedscale.tensor import Tensor, record


@dataclass
class MacCounter:
    """Multiply-accumulates of every conv2d evaluated while active."""

    total: int = 0


_macs: ContextVar[MacCounter | None] = ContextVar("gatedscale_macs", default=None)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _macs.set(counter)
    try:
        yield counter
    finally:
        _macs.reset(token)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}") from e

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product with broadcasting over size-1 extents."""
    try:
        out = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"cannot multiply {a.shape} and {b.shape}") from e

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, rule)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def rule(g):
        return (g * factor,)

    return record("scale", (x,), out, rule)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1)

    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), out, rule)


# ---------------------------------------------------------------------------
# Convolution and normalization
# ---------------------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _taps(k: int, dilation: int, stride: int, oh: int, ow: int):
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            yield i, j, slice(r0, r0 + stride * (oh - 1) + 1, stride), slice(c0, c0 + stride * (ow - 1) + 1, stride)


def _pointwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Channel sum accumulated in order m = 0..C-1, one pixel at a time.
    out = w[None, :, 0, None, None] * x[:, None, 0]
    for m in range(1, x.shape[1]):
        out = out + w[None, :, m, None, None] * x[:, None, m]
    return out


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlation with bias; differentiable in x, weight and bias."""
    n, c, h, w = x.shape
    if c != p.c_in:
        raise ShapeError(f"conv2d expects {p.c_in} input channels, got {c}")
    k, stride, pad, dil = p.kernel, p.stride, p.padding, p.dilation
    oh, ow = _out_extent(h, k, stride, pad, dil), _out_extent(w, k, stride, pad, dil)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output extent ({oh}, {ow}) is not positive for input {x.shape}")
    counter = _macs.get()
    if counter is not None:
        counter.total += n * p.c_out * oh * ow * c * k * k

    weight, xd = p.weight.data, x.data

    if k == 1 and stride == 1 and pad == 0:
        wm = weight[:, :, 0, 0]
        out = _pointwise(xd, wm) + p.bias.data

        def rule(g):
            gx = np.einsum("oc,nohw->nchw", wm, g)
            gw = np.einsum("nohw,nchw->oc", g, xd).reshape(weight.shape)
            return gx, gw, g.sum(axis=(0, 2, 3), keepdims=True)

        return record("conv2d", (x, p.weight, p.bias), out, rule)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, oh, ow), dtype=xd.dtype)
    for i, j, rows, colsl in _taps(k, dil, stride, oh, ow):
        cols[:, :, i, j] = xp[:, :, rows, colsl]
    cols = cols.reshape(n, c * k * k, oh * ow)
    wm = weight.reshape(p.c_out, -1)
    out = (wm @ cols).reshape(n, p.c_out, oh, ow) + p.bias.data

    def rule(g):
        gm = g.reshape(n, p.c_out, oh * ow)
        gw = (gm @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = (wm.T @ gm).reshape(n, c, k, k, oh, ow)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i, j, rows, colsl in _taps(k, dil, stride, oh, ow):
            gxp[:, :, rows, colsl] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + w]
        return gx, gw, g.sum(axis=(0, 2, 3), keepdims=True)

    return record("conv2d", (x, p.weight, p.bias), out, rule)


def batch_norm(x: Tensor, p: NormParams) -> Tensor:
    """Per-channel normalization; train mode also updates the running stats.

    Running variance is tracked with the unbiased (m / (m - 1)) estimate.
    """
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"batch_norm expects {p.channels} channels, got {c}")
    axes = (0, 2, 3)
    gamma = p.gamma.data
    xd = x.data

    if p.mode == "train":
        m = n * h * w
        if m == 1:
            raise ShapeError("train-mode batch_norm needs more than one value per channel")
        mean = xd.mean(axis=axes, keepdims=True)
        var = xd.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + p.eps)
        xhat = (xd - mean) * inv
        mom = p.momentum
        p.running_mean.data[...] = (1 - mom) * p.running_mean.data + mom * mean
        p.running_var.data[...] = (1 - mom) * p.running_var.data + mom * var * (m / (m - 1))

        def rule(g):
            dxhat = g * gamma
            gx = (inv / m) * (
                m * dxhat - dxhat.sum(axis=axes, keepdims=True) - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes, keepdims=True), g.sum(axis=axes, keepdims=True)

    elif p.mode == "eval":
        inv = 1.0 / np.sqrt(p.running_var.data + p.eps)
        xhat = (xd - p.running_mean.data) * inv

        def rule(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes, keepdims=True), g.sum(axis=axes, keepdims=True)

    else:
        raise ValueError(f"unknown norm mode {p.mode!r}")

    out = gamma * xhat + p.beta.data
    return record("batch_norm", (x, p.gamma, p.beta), out, rule)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)

    def rule(g):
        return (g * mask,)

    return record("relu", (x,), out, rule)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    z = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1 / (1 + z), z / (1 + z))
    one = x.dtype.type(1)
    s = np.clip(s, np.finfo(x.dtype).tiny, np.nextafter(one, x.dtype.type(0))).astype(x.dtype, copy=False)

    def rule(g):
        return (g * s * (1 - s),)

    return record("sigmoid", (x,), s, rule)


# ---------------------------------------------------------------------------
# Scale transfer
# ---------------------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Rows hold the half-pixel bilinear weights of each output coordinate."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = np.where(i1 == i0, 0.0, src - i0)
    a = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - lam)
    np.add.at(a, (rows, i1), lam)
    return a.astype(dtype)


def bilinear_upsample(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    n, c, h, w = x.shape
    oh, ow = out_hw
    if oh < h or ow < w:
        raise ShapeError(f"bilinear_upsample cannot shrink {(h, w)} to {(oh, ow)}; use avg_pool_down")
    ah, aw = _interp_matrix(h, oh, x.dtype), _interp_matrix(w, ow, x.dtype)
    out = ah @ x.data @ aw.T

    def rule(g):
        return (ah.T @ g @ aw,)

    return record("bilinear_upsample", (x,), out, rule)


def avg_pool_down(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping factor x factor mean pooling."""
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise ShapeError(f"avg_pool_down factor {factor} does not divide {(h, w)}")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def rule(g):
        spread = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (spread / (factor * factor),)

    return record("avg_pool_down", (x,), out, rule)


def _pool_matrix(n_in: int, bins: int, dtype) -> np.ndarray:
    p = np.zeros((bins, n_in))
    for i in range(bins):
        lo = (i * n_in) // bins
        hi = -((-(i + 1) * n_in) // bins)
        p[i, lo:hi] = 1.0 / (hi - lo)
    return p.astype(dtype)


def adaptive_avg_pool(x: Tensor, bins: tuple[int, int]) -> Tensor:
    """Bin (i, j) averages rows [floor(i*H/bH), ceil((i+1)*H/bH)) and likewise for columns."""
    n, c, h, w = x.shape
    bh, bw = bins
    if not (1 <= bh <= h and 1 <= bw <= w):
        raise ShapeError(f"adaptive_avg_pool bins {bins} do not fit input {(h, w)}")
    ph, pw = _pool_matrix(h, bh, x.dtype), _pool_matrix(w, bw, x.dtype)
    out = ph @ x.data @ pw.T

    def rule(g):
        return (ph.T @ g @ pw,)

    return record("adaptive_avg_pool", (x,), out, rule)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels spatial mismatch: {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def rule(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return record("concat_channels", tuple(xs), out, rule)
