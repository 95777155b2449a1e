"""Operator attribute recovery.

Conv/pool geometry obeys

    out_h = floor((in_h + 2*pad - kernel) / stride) + 1

and stride/padding are found by enumerating (stride, padding) in ascending
order (stride outer from 1, padding inner from 0, padding < kernel) until the
constraint holds.  Pools whose kernel is not in the dims are recovered either
from the 1/k^2 constant left in the code (avgpool) or by simulating forward
over dumped tensors until the output matches exactly (maxpool, concat, and
channel shuffles).  GLOW region arithmetic supplies channel counts and
heights when no dimension records exist.
"""

from __future__ import annotations

import math
from itertools import permutations

import numpy as np

from . import ops
from .errors import (
    AttrExtractionError,
    CapacityError,
    GeometryError,
    RecoveryError,
    RegionError,
)
from .trace import dump_io

RECIPROCAL_TOL = 0.02  # printed constants are truncated; see the 1/169 case
MAX_CONCAT_INPUTS = 8


def candidate_sp(in_h: int, out_h: int, kernel: int):
    """Yield every (stride, padding) satisfying the geometry constraint,
    stride ascending then padding ascending, padding < kernel."""
    for stride in range(1, in_h + 1):
        for padding in range(0, kernel):
            span = in_h + 2 * padding - kernel
            if span < 0:
                continue
            if span // stride + 1 == out_h:
                yield stride, padding


def infer_sp(in_h: int, out_h: int, kernel: int) -> tuple[int, int]:
    """First (stride, padding) in enumeration order satisfying the constraint."""
    if in_h < 1 or out_h < 1 or kernel < 1:
        raise GeometryError(f"bad geometry in={in_h} out={out_h} k={kernel}")
    for stride, padding in candidate_sp(in_h, out_h, kernel):
        return stride, padding
    raise GeometryError(
        f"no stride/padding reproduces out={out_h} from in={in_h}, k={kernel}"
    )


def glow_conv_channels(weight_region: int, bias_region: int, kernel: int):
    """Channel counts from traced memory-region sizes (GLOW path)."""
    out_channel = int(bias_region)
    if out_channel <= 0:
        raise RegionError(f"bias region {bias_region} cannot be a channel count")
    denom = out_channel * kernel * kernel
    if weight_region % denom:
        raise RegionError(
            f"weight region {weight_region} not divisible by "
            f"out_channel*k^2 = {denom} (wrong kernel or truncated trace?)"
        )
    return weight_region // denom, out_channel


def glow_pool_heights(region_in: int, region_out: int, channel: int):
    """Square spatial heights from region sizes and the channel count."""
    heights = []
    for region in (region_in, region_out):
        if channel <= 0 or region % channel:
            raise RegionError(f"region {region} not divisible by channel {channel}")
        per_chan = region // channel
        h = math.isqrt(per_chan)
        if h * h != per_chan:
            raise RegionError(f"region {region}/channel {channel} is not a square")
        heights.append(h)
    return heights[0], heights[1]


def _square_input(arr: np.ndarray, what: str) -> np.ndarray:
    if arr.ndim != 4:
        raise RecoveryError(f"{what}: expected 4-D tensor, got {arr.shape}")
    if arr.shape[2] != arr.shape[3]:
        raise RecoveryError(
            f"{what}: non-square spatial dims {arr.shape[2]}x{arr.shape[3]} unsupported"
        )
    return arr


def recover_maxpool(inp: np.ndarray, out: np.ndarray) -> dict:
    """Enumerate (k, s, p) and simulate max pooling until the dumped output
    is reproduced element-exactly."""
    inp = _square_input(inp, "maxpool recovery")
    out = _square_input(out, "maxpool recovery")
    in_h, out_h = inp.shape[2], out.shape[2]
    for kernel in range(1, inp.shape[3] + 1):
        for stride, padding in candidate_sp(in_h, out_h, kernel):
            sim = ops.maxpool(inp, kernel, stride, padding)
            if sim.shape == out.shape and np.array_equal(sim, out):
                return {"kernel": kernel, "stride": stride, "padding": padding}
    raise RecoveryError(
        "no pooling configuration reproduces the dumped output "
        "(misclassified operator?)"
    )


def kernel_from_reciprocal(constant: float) -> int:
    if not 0 < constant <= 1.0:
        raise AttrExtractionError(f"constant {constant} is not a window reciprocal")
    est = 1.0 / math.sqrt(constant)
    k = round(est)
    if k < 1 or abs(est - k) >= RECIPROCAL_TOL:
        raise AttrExtractionError(
            f"reciprocal {constant} does not invert to an integer kernel (got {est:.4f})"
        )
    return k


def recover_avgpool(pseudocode: str, backend, in_h: int, out_h: int,
                    dumped=None) -> dict:
    """Kernel from the 1/k^2 constant, then stride/padding by enumeration.

    Falls back to exact simulation over dumps when no constant survives in
    the code (mirrors the maxpool route with averaging).
    """
    try:
        est = backend.extract_attr(pseudocode, "avgpool", "kernel_size")
        kernel = round(float(est))
        if kernel < 1 or abs(float(est) - kernel) >= RECIPROCAL_TOL:
            raise AttrExtractionError(f"estimate {est} not close to an integer")
        stride, padding = infer_sp(in_h, out_h, kernel)
        return {"kernel": kernel, "stride": stride, "padding": padding}
    except AttrExtractionError:
        if dumped is None:
            raise
    inp, out = dumped
    inp = _square_input(inp, "avgpool recovery")
    out = _square_input(out, "avgpool recovery")
    for kernel in range(1, inp.shape[3] + 1):
        for stride, padding in candidate_sp(inp.shape[2], out.shape[2], kernel):
            sim = ops.avgpool(inp, kernel, stride, padding)
            if sim.shape == out.shape and np.array_equal(sim, out):
                return {"kernel": kernel, "stride": stride, "padding": padding}
    raise RecoveryError("no average-pooling configuration matches the dumps")


def extract_scalar_attrs(pseudocode: str, backend, op: str) -> dict:
    """lrn {size, alpha, beta, bias} / clip {min, max} from code constants."""
    if op == "clip":
        lo, hi = backend.extract_attr(pseudocode, "clip", "bounds")
        return {"min": float(lo), "max": float(hi)}
    if op == "lrn":
        attrs = backend.extract_attr(pseudocode, "lrn", "all")
        return dict(attrs)
    raise AttrExtractionError(f"scalar extraction only covers lrn/clip, not {op}")


def _shuffle_group_candidates(channels: int):
    yield None
    for g in range(2, channels + 1):
        if channels % g == 0:
            yield g


def _apply_activation(arr: np.ndarray, activation) -> np.ndarray:
    if activation is None:
        return arr
    if activation[0] == "relu":
        return ops.relu(arr)
    return ops.clip(arr, activation[1], activation[2])


def recover_concat(inputs, out: np.ndarray, max_inputs: int = MAX_CONCAT_INPUTS,
                   activation=None) -> dict:
    """Enumerate input order and optional channel-shuffle groups until the
    concatenated (and shuffled, and activated) result equals the dumped
    output exactly.

    Also serves fused layout transforms: a single input recovers just the
    shuffle group count.
    """
    n = len(inputs)
    if n > max_inputs:
        raise CapacityError(
            f"{n} concat inputs exceed the enumeration bound {max_inputs}"
        )
    if n == 0:
        raise RecoveryError("concat recovery needs at least one input dump")
    total_c = out.shape[1] if out.ndim >= 2 else 0
    for groups in _shuffle_group_candidates(total_c):
        for order in permutations(range(n)):
            cat = ops.concat([inputs[i] for i in order]) if n > 1 else np.asarray(inputs[0])
            if cat.shape != out.shape:
                continue
            sim = ops.channel_shuffle(cat, groups) if groups else cat
            if np.array_equal(_apply_activation(sim, activation), out):
                result = {"order": list(order)}
                if groups:
                    result["shuffle_groups"] = groups
                return result
    raise RecoveryError("no input order / shuffle grouping reproduces the output")


def recover_transpose(inp: np.ndarray, out: np.ndarray) -> list[int]:
    """Enumerate axis permutations until the dumped output is reproduced."""
    for perm in permutations(range(inp.ndim)):
        if tuple(inp.shape[p] for p in perm) != tuple(out.shape):
            continue
        if np.array_equal(np.transpose(inp, perm), out):
            return list(perm)
    raise RecoveryError("no axis permutation reproduces the output")


def recover_pool_from_trace(log, fn: str, kind: str, backend=None,
                            pseudocode: str = "") -> dict:
    """Convenience wrapper running pool recovery on trace dumps."""
    inputs, out = dump_io(log, fn)
    if kind == "maxpool":
        return recover_maxpool(inputs[0], out)
    return recover_avgpool(pseudocode, backend, inputs[0].shape[2], out.shape[2],
                           dumped=(inputs[0], out))
