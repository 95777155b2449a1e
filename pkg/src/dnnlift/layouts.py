"""Tensor layout identification and normalization.

Activations may be stored channel-blocked as [N, C/c, H, W, c] and conv
kernels as [O/A, I/B, K, K, B, A]; the trailing block dims are (B, A) in that
order.  This module maps stored dims to logical NCHW dims and permutes flat
weight data between stored and standard order.  The blocked GLOW kernel form
[O/8, K, K, I, 8] is also supported; it is never inferred from dims (GLOW
exports carry none) and is selected explicitly by operator type.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import prod

import numpy as np

from .errors import LayoutError


class LayoutKind:
    NCHW = "nchw"
    NCHWC = "nchwc"
    KERNEL_BLOCKED = "kernel_blocked"
    GLOW_C8 = "glow_c8"
    NHWC = "nhwc"
    FLAT2D = "flat2d"


@dataclass(frozen=True)
class LayoutSpec:
    kind: str
    stored_dims: tuple[int, ...]
    logical_dims: tuple[int, ...]
    blocks: tuple[int, ...] = field(default=())  # (c,) or (A, B) or (8,)

    @property
    def numel(self) -> int:
        return prod(self.stored_dims)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "stored_dims": list(self.stored_dims),
            "logical_dims": list(self.logical_dims),
            "blocks": list(self.blocks),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LayoutSpec":
        return cls(
            kind=obj["kind"],
            stored_dims=tuple(obj["stored_dims"]),
            logical_dims=tuple(obj["logical_dims"]),
            blocks=tuple(obj.get("blocks", [])),
        )


def identity_spec(dims) -> LayoutSpec:
    dims = tuple(int(d) for d in dims)
    kind = LayoutKind.FLAT2D if len(dims) <= 2 else LayoutKind.NCHW
    return LayoutSpec(kind=kind, stored_dims=dims, logical_dims=dims)


def glow_c8_spec(out_c: int, in_c: int, k: int) -> LayoutSpec:
    """Blocked GLOW kernel layout for a logical [O, I, K, K] kernel."""
    if out_c % 8 != 0:
        raise LayoutError(f"glow c8 kernel needs out channels divisible by 8, got {out_c}")
    return LayoutSpec(
        kind=LayoutKind.GLOW_C8,
        stored_dims=(out_c // 8, k, k, in_c, 8),
        logical_dims=(out_c, in_c, k, k),
        blocks=(8,),
    )


def normalize_dims(record) -> LayoutSpec:
    """Identify the stored layout of a parameter record and compute logical dims.

    Works from the dimension count alone, so it is agnostic to which layout
    the compiler chose.  A pre-tagged NHWC record is honored.  Anything not
    matching a known pattern passes through unchanged with a warning.
    """
    dims = tuple(int(d) for d in record.dims)
    tag = getattr(record, "layout_tag", "unknown")

    if tag == "nhwc" and len(dims) == 4:
        n, h, w, c = dims
        return LayoutSpec(LayoutKind.NHWC, dims, (n, c, h, w))
    if len(dims) == 5:
        n, c_outer, h, w, c = dims
        return LayoutSpec(LayoutKind.NCHWC, dims, (n, c_outer * c, h, w), blocks=(c,))
    if len(dims) == 6:
        o_outer, i_outer, kh, kw, b, a = dims
        return LayoutSpec(
            LayoutKind.KERNEL_BLOCKED,
            dims,
            (o_outer * a, i_outer * b, kh, kw),
            blocks=(a, b),
        )
    if len(dims) == 4:
        return LayoutSpec(LayoutKind.NCHW, dims, dims)
    if len(dims) == 2:
        return LayoutSpec(LayoutKind.FLAT2D, dims, dims)
    if len(dims) > 6:
        warnings.warn(f"unrecognized layout for dims {dims}; passing through")
    return identity_spec(dims)


def _check_size(data: np.ndarray, spec: LayoutSpec):
    if data.size != spec.numel:
        raise LayoutError(
            f"data has {data.size} elements but layout {spec.stored_dims} "
            f"needs {spec.numel}"
        )


def reorder_weights(data: np.ndarray, stored: LayoutSpec) -> np.ndarray:
    """Permute stored (possibly blocked) data into standard logical layout.

    Pure permutation: output is bit-identical to input elementwise.  Returns
    an array shaped ``stored.logical_dims``.
    """
    data = np.asarray(data)
    _check_size(data, stored)
    arr = data.reshape(stored.stored_dims)
    if stored.kind == LayoutKind.NCHWC:
        n, co, h, w, c = stored.stored_dims
        out = arr.transpose(0, 1, 4, 2, 3).reshape(n, co * c, h, w)
    elif stored.kind == LayoutKind.KERNEL_BLOCKED:
        oo, io, kh, kw, b, a = stored.stored_dims
        out = arr.transpose(0, 5, 1, 4, 2, 3).reshape(oo * a, io * b, kh, kw)
    elif stored.kind == LayoutKind.GLOW_C8:
        oo, kh, kw, i, c8 = stored.stored_dims
        out = arr.transpose(0, 4, 3, 1, 2).reshape(oo * c8, i, kh, kw)
    elif stored.kind == LayoutKind.NHWC:
        out = arr.transpose(0, 3, 1, 2)
    else:
        out = arr.reshape(stored.logical_dims)
    return np.ascontiguousarray(out)


def block_weights(data: np.ndarray, spec: LayoutSpec) -> np.ndarray:
    """Inverse of reorder_weights: standard layout -> stored layout."""
    data = np.asarray(data)
    _check_size(data, spec)
    arr = data.reshape(spec.logical_dims)
    if spec.kind == LayoutKind.NCHWC:
        n, co, h, w, c = spec.stored_dims
        out = arr.reshape(n, co, c, h, w).transpose(0, 1, 3, 4, 2)
    elif spec.kind == LayoutKind.KERNEL_BLOCKED:
        oo, io, kh, kw, b, a = spec.stored_dims
        out = arr.reshape(oo, a, io, b, kh, kw).transpose(0, 2, 4, 5, 3, 1)
    elif spec.kind == LayoutKind.GLOW_C8:
        oo, kh, kw, i, c8 = spec.stored_dims
        out = arr.reshape(oo, c8, i, kh, kw).transpose(0, 3, 4, 2, 1)
    elif spec.kind == LayoutKind.NHWC:
        out = arr.transpose(0, 2, 3, 1)
    else:
        out = arr.reshape(spec.stored_dims)
    return np.ascontiguousarray(out)


def nchwc_spec(n: int, c: int, h: int, w: int, block: int) -> LayoutSpec:
    if c % block != 0:
        raise LayoutError(f"channel count {c} not divisible by block {block}")
    return LayoutSpec(
        LayoutKind.NCHWC, (n, c // block, h, w, block), (n, c, h, w), blocks=(block,)
    )


def kernel_blocked_spec(o: int, i: int, k: int, a: int, b: int) -> LayoutSpec:
    if o % a != 0 or i % b != 0:
        raise LayoutError(f"kernel {o}x{i} not divisible by blocks A={a}, B={b}")
    return LayoutSpec(
        LayoutKind.KERNEL_BLOCKED, (o // a, i // b, k, k, b, a), (o, i, k, k), blocks=(a, b)
    )
