"""Differentiable primitives: convolution, elementwise math, reductions,
channel broadcasts, and pixel shuffling.

All operators take and return :class:`~srquant.autodiff.Tensor` and record
their vector-Jacobian product on the active tape. Feature tensors are laid
out (B, C, H, W) in row-major float32.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, record_op
from .errors import DimensionError

__all__ = [
    "conv2d",
    "relu",
    "add",
    "sub",
    "mul",
    "mul_scalar",
    "add_scalar",
    "absolute",
    "reciprocal",
    "broadcast_add_channel",
    "broadcast_mul_channel",
    "mean",
    "std",
    "channel_mean",
    "channel_std",
    "normalize_l2_sample",
    "pixel_shuffle",
    "pixel_unshuffle",
]


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: expected a (B, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Gather k*k patches into columns: (B, C*k*k, h_out*w_out)."""
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, h_out, w_out),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(b, c * k * k, h_out * w_out)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    """Scatter-add columns back onto the padded image (inverse of _im2col)."""
    b, c, hp, wp = padded_shape
    out = np.zeros(padded_shape, dtype=np.float32)
    cols6 = cols.reshape(b, c, k, k, h_out, w_out)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += cols6[:, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    ``weight`` has shape (C_out, C_in, k, k) and ``bias`` shape (C_out,).
    Backward produces gradients for the input, the weight, and the bias.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: kernel must be (C_out, C_in, k, k), got shape {weight.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    b, c_in, h, w = x.shape
    c_out, kc_in, k, _ = weight.shape
    if kc_in != c_in:
        raise DimensionError(
            f"conv2d: input shape {x.shape} has {c_in} channels but kernel shape {weight.shape} expects {kc_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv2d: kernel {k}x{k} does not fit input shape {x.shape} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, k, stride, h_out, w_out)
    w2 = weight.data.reshape(c_out, -1)
    out_data = np.matmul(w2, cols).reshape(b, c_out, h_out, w_out)
    out_data = out_data + bias.data.reshape(1, c_out, 1, 1)
    out = Tensor(out_data)

    def vjp(g: np.ndarray):
        g2 = g.reshape(b, c_out, h_out * w_out)
        gb = g.sum(axis=(0, 2, 3))
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(w2.T, g2)
        gxp = _col2im(gcols, xp.shape, k, stride, h_out, w_out)
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + w]
        else:
            gx = gxp
        return gx, gw, gb

    record_op(out, (x, weight, bias), vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    positive = x.data > 0.0

    def vjp(g):
        return (g * positive,)

    record_op(out, (x,), vjp)
    return out


def _require_same_shape(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shapes {x.shape} and {y.shape} differ")


def add(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "add")
    out = Tensor(x.data + y.data)
    record_op(out, (x, y), lambda g: (g, g))
    return out


def sub(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "sub")
    out = Tensor(x.data - y.data)
    record_op(out, (x, y), lambda g: (g, -g))
    return out


def mul(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "mul")
    out = Tensor(x.data * y.data)
    xd, yd = x.data, y.data
    record_op(out, (x, y), lambda g: (g * yd, g * xd))
    return out


def mul_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * np.float32(c))
    record_op(out, (x,), lambda g: (g * np.float32(c),))
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + np.float32(c))
    record_op(out, (x,), lambda g: (g,))
    return out


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    out = Tensor(np.abs(x.data))
    sgn = np.sign(x.data)
    record_op(out, (x,), lambda g: (g * sgn,))
    return out


def reciprocal(x: Tensor) -> Tensor:
    inv = (1.0 / x.data).astype(np.float32)
    out = Tensor(inv)
    record_op(out, (x,), lambda g: (-g * inv * inv,))
    return out


# ---------------------------------------------------------------------------
# channel broadcasts


def _require_channel_vector(x: Tensor, v: Tensor, op: str) -> None:
    _require_4d(x, op)
    if v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise DimensionError(f"{op}: vector shape {v.shape} does not match {x.shape[1]} channels of {x.shape}")


def broadcast_add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Add v[c] to every element of channel c."""
    _require_channel_vector(x, v, "broadcast_add_channel")
    out = Tensor(x.data + v.data.reshape(1, -1, 1, 1))
    record_op(out, (x, v), lambda g: (g, g.sum(axis=(0, 2, 3))))
    return out


def broadcast_mul_channel(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every element of channel c by v[c]."""
    _require_channel_vector(x, v, "broadcast_mul_channel")
    vd = v.data.reshape(1, -1, 1, 1)
    out = Tensor(x.data * vd)
    xd = x.data
    record_op(out, (x, v), lambda g: (g * vd, (g * xd).sum(axis=(0, 2, 3))))
    return out


# ---------------------------------------------------------------------------
# reductions

# Population convention throughout: std divides by N, not N - 1, so a fixed
# set of values is described by its own spread and N = 1 stays finite.


def mean(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean: empty tensor")
    out = Tensor(np.float32(x.data.mean()))
    n = x.size
    shape = x.shape

    def vjp(g):
        return (np.full(shape, g / np.float32(n), dtype=np.float32),)

    record_op(out, (x,), vjp)
    return out


def std(x: Tensor) -> Tensor:
    """Population standard deviation over every element.

    Backward at zero variance returns a zero gradient instead of NaN.
    """
    if x.size < 2:
        raise DimensionError(f"std: needs at least 2 elements, got shape {x.shape}")
    m = x.data.mean(dtype=np.float64)
    centered = x.data.astype(np.float64) - m
    s = np.sqrt(np.mean(centered * centered))
    out = Tensor(np.float32(s))
    n = x.size

    def vjp(g):
        if s == 0.0:
            return (np.zeros(x.shape, dtype=np.float32),)
        return ((g * (centered / (n * s))).astype(np.float32),)

    record_op(out, (x,), vjp)
    return out


def channel_mean(x: Tensor) -> Tensor:
    """Per-channel mean aggregated jointly over B, H, W; returns a (C,) tensor."""
    _require_4d(x, "channel_mean")
    if x.size == 0:
        raise DimensionError("channel_mean: empty tensor")
    out = Tensor(x.data.mean(axis=(0, 2, 3)))
    b, c, h, w = x.shape
    n = b * h * w

    def vjp(g):
        return (np.broadcast_to(g.reshape(1, c, 1, 1) / np.float32(n), x.shape).astype(np.float32),)

    record_op(out, (x,), vjp)
    return out


def channel_std(x: Tensor) -> Tensor:
    """Per-channel population std over B, H, W; returns a (C,) tensor."""
    _require_4d(x, "channel_std")
    b, c, h, w = x.shape
    n = b * h * w
    if n < 2:
        raise DimensionError(f"channel_std: needs at least 2 elements per channel, got shape {x.shape}")
    m = x.data.mean(axis=(0, 2, 3), dtype=np.float64).reshape(1, c, 1, 1)
    centered = x.data.astype(np.float64) - m
    var = np.mean(centered * centered, axis=(0, 2, 3))
    s = np.sqrt(var)
    out = Tensor(s.astype(np.float32))

    def vjp(g):
        safe = np.where(s > 0.0, s, 1.0)
        scale = np.where(s > 0.0, g / (n * safe), 0.0).reshape(1, c, 1, 1)
        return ((centered * scale).astype(np.float32),)

    record_op(out, (x,), vjp)
    return out


def normalize_l2_sample(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each sample (index along dim 0) to unit L2 norm.

    Norms are floored at ``eps`` so an all-zero sample maps to zeros.
    """
    _require_4d(x, "normalize_l2_sample")
    flat = x.data.reshape(x.shape[0], -1).astype(np.float64)
    norms = np.sqrt((flat * flat).sum(axis=1))
    norms = np.maximum(norms, eps)
    nb = norms.reshape(-1, 1, 1, 1)
    y = (x.data / nb).astype(np.float32)
    out = Tensor(y)

    def vjp(g):
        dot = (g.astype(np.float64) * y).sum(axis=(1, 2, 3)).reshape(-1, 1, 1, 1)
        return (((g - y * dot) / nb).astype(np.float32),)

    record_op(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# pixel shuffle


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (B, C, H, W) to (B, C/r^2, H*r, W*r).

    Output element (b, c, h*r + i, w*r + j) comes from input
    (b, c*r^2 + i*r + j, h, w); the op is exactly invertible.
    """
    _require_4d(x, "pixel_shuffle")
    b, c, h, w = x.shape
    if r < 1 or c % (r * r) != 0:
        raise DimensionError(f"pixel_shuffle: {c} channels not divisible by r^2 = {r * r}")
    c_out = c // (r * r)
    out_data = (
        x.data.reshape(b, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c_out, h * r, w * r)
    )
    out = Tensor(np.ascontiguousarray(out_data))

    def vjp(g):
        return (_unshuffle_data(g, r),)

    record_op(out, (x,), vjp)
    return out


def _unshuffle_data(y: np.ndarray, r: int) -> np.ndarray:
    b, c, hr, wr = y.shape
    h, w = hr // r, wr // r
    return np.ascontiguousarray(
        y.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h, w)
    )


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _require_4d(x, "pixel_unshuffle")
    b, c, h, w = x.shape
    if r < 1 or h % r != 0 or w % r != 0:
        raise DimensionError(f"pixel_unshuffle: spatial shape {x.shape} not divisible by r = {r}")
    out = Tensor(_unshuffle_data(x.data, r))

    def vjp(g):
        return (_shuffle_data(g, r),)

    record_op(out, (x,), vjp)
    return out


def _shuffle_data(y: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = y.shape
    c_out = c // (r * r)
    return np.ascontiguousarray(
        y.reshape(b, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c_out, h * r, w * r)
    )
