"""Reference operator semantics: NCHW, float32 accumulation, batch-first.

These are the primitives the forward engine executes and the attribute
recovery simulates against.  Composite stages (pool window sum, stabilized
softmax pieces) are exposed separately so split-operator variants compose to
bit-identical results.
"""

from __future__ import annotations

import numpy as np

from .errors import ExecutionError

F32 = np.float32


def _as_f32(x):
    return np.asarray(x, dtype=F32)


def _channel_operand(x: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Reshape a per-channel vector so it broadcasts against NCHW data."""
    if other.ndim == 1 and x.ndim == 4 and other.shape[0] == x.shape[1]:
        return other.reshape(1, -1, 1, 1)
    return other


def add(x, y):
    x, y = _as_f32(x), _as_f32(y)
    return x + _channel_operand(x, y)


def sub(x, y):
    x, y = _as_f32(x), _as_f32(y)
    return x - _channel_operand(x, y)


def mul(x, y):
    x, y = _as_f32(x), _as_f32(y)
    return x * _channel_operand(x, y)


def div(x, y):
    x, y = _as_f32(x), _as_f32(y)
    return x / _channel_operand(x, y)


def power(x, y):
    x, y = _as_f32(x), _as_f32(y)
    return np.power(x, _channel_operand(x, y))


def relu(x):
    return np.maximum(_as_f32(x), F32(0))


def clip(x, lo, hi):
    return np.clip(_as_f32(x), F32(lo), F32(hi))


def sqrt(x):
    return np.sqrt(_as_f32(x))


def rsqrt(x):
    return F32(1) / np.sqrt(_as_f32(x))


def exp(x):
    return np.exp(_as_f32(x))


def neg(x):
    return -_as_f32(x)


def abs_(x):
    return np.abs(_as_f32(x))


def softmax(x):
    """Stabilized softmax over the channel/feature axis (axis 1)."""
    x = _as_f32(x)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True, dtype=F32)
    return e / s


def softmax_exp_stage(x):
    """exp(x - max): the first half of a split softmax."""
    x = _as_f32(x)
    return np.exp(x - x.max(axis=1, keepdims=True))


def softmax_norm_stage(e):
    """Divide by the feature-axis sum: the second half of a split softmax."""
    e = _as_f32(e)
    return e / e.sum(axis=1, keepdims=True, dtype=F32)


def lrn(x, size, alpha, beta, bias):
    """Cross-channel local response normalization (ONNX convention)."""
    x = _as_f32(x)
    sq = x * x
    half = (int(size) - 1) // 2
    padded = np.pad(sq, ((0, 0), (half, half), (0, 0), (0, 0)))
    acc = np.zeros_like(x)
    for d in range(int(size)):
        acc += padded[:, d : d + x.shape[1]]
    denom = np.power(F32(bias) + F32(alpha) * acc / F32(size), F32(beta))
    return x / denom


def pad(x, pad_h, pad_w):
    x = _as_f32(x)
    return np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))


def _pool_prepare(x, kernel, stride, padding, fill):
    x = _as_f32(x)
    if x.ndim != 4:
        raise ExecutionError(f"pooling expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ExecutionError(
            f"pooling k={kernel} s={stride} p={padding} does not fit input {x.shape}"
        )
    if padding:
        xp = np.full((n, c, h + 2 * padding, w + 2 * padding), F32(fill))
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    return xp, oh, ow


def maxpool(x, kernel, stride, padding):
    xp, oh, ow = _pool_prepare(x, kernel, stride, padding, -np.inf)
    out = np.full((x.shape[0], x.shape[1], oh, ow), F32(-np.inf))
    for kh in range(kernel):
        for kw in range(kernel):
            win = xp[:, :, kh : kh + stride * oh : stride, kw : kw + stride * ow : stride]
            np.maximum(out, win, out=out)
    return out


def pool_window_sum(x, kernel, stride, padding):
    """Window sum with zero padding: avgpool before its 1/k^2 scale."""
    xp, oh, ow = _pool_prepare(x, kernel, stride, padding, 0.0)
    out = np.zeros((x.shape[0], x.shape[1], oh, ow), dtype=F32)
    for kh in range(kernel):
        for kw in range(kernel):
            out += xp[:, :, kh : kh + stride * oh : stride, kw : kw + stride * ow : stride]
    return out


def avgpool_scale(kernel) -> F32:
    return F32(1.0) / F32(kernel * kernel)


def avgpool(x, kernel, stride, padding):
    """Average pooling, divisor k^2 regardless of padding overlap."""
    return pool_window_sum(x, kernel, stride, padding) * avgpool_scale(kernel)


def reduce_sum(x, axes=(2, 3)):
    return _as_f32(x).sum(axis=tuple(axes), keepdims=True, dtype=F32)


def reduce_max(x, axes=(2, 3)):
    return _as_f32(x).max(axis=tuple(axes), keepdims=True)


def conv2d(x, w, stride, padding):
    """Direct convolution via per-tap strided slices; float32 throughout."""
    x, w = _as_f32(x), _as_f32(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ExecutionError(f"conv2d expects 4-D data/kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, i, kh_n, kw_n = w.shape
    if i != c:
        raise ExecutionError(f"conv2d channel mismatch: input {c} vs kernel {i}")
    oh = (h + 2 * padding - kh_n) // stride + 1
    ow = (wd + 2 * padding - kw_n) // stride + 1
    if oh < 1 or ow < 1:
        raise ExecutionError(f"conv2d geometry does not fit: {x.shape} k={kh_n}")
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=F32)
        xp[:, :, padding : padding + h, padding : padding + wd] = x
    else:
        xp = x
    out = np.zeros((n, o, oh, ow), dtype=F32)
    for kh in range(kh_n):
        for kw in range(kw_n):
            win = xp[:, :, kh : kh + stride * oh : stride, kw : kw + stride * ow : stride]
            out += np.einsum("nihw,oi->nohw", win, w[:, :, kh, kw], dtype=F32)
    return out


def dense(x, w):
    x, w = _as_f32(x), _as_f32(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ExecutionError(f"dense shape mismatch: {x.shape} @ {w.shape}.T")
    return x @ w.T


def flatten(x):
    x = _as_f32(x)
    return x.reshape(x.shape[0], -1)


def reshape(x, shape):
    return _as_f32(x).reshape(shape)


def transpose(x, perm):
    return np.ascontiguousarray(_as_f32(x).transpose(perm))


def expand_dim(x, axis):
    return np.expand_dims(_as_f32(x), int(axis))


def concat(tensors, axis=1):
    return np.concatenate([_as_f32(t) for t in tensors], axis=axis)


def split(x, sections, axis=1):
    x = _as_f32(x)
    bounds = np.cumsum(sections)[:-1]
    return [np.ascontiguousarray(p) for p in np.split(x, bounds, axis=axis)]


def channel_shuffle(x, groups):
    """reshape -> transpose -> reshape over the channel axis."""
    x = _as_f32(x)
    n, c, h, w = x.shape
    if c % groups:
        raise ExecutionError(f"channel count {c} not divisible by groups {groups}")
    y = x.reshape(n, groups, c // groups, h, w)
    y = y.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(y.reshape(n, c, h, w))
