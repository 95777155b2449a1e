"""Operator type recognition.

Three tiers, applied in order:

  1. coarse classification from parameter dimensions (TVM only): layout and
     complex operators resolve directly, elementwise/reduction operators get
     a candidate list keyed by taxonomy class;
  2. fine classification of the candidate list by a pluggable backend that
     reads the pseudocode (GLOW skips tier 1 and offers the whole operator
     list as candidates);
  3. fused-suffix resolution for conv/dense from the dynamic trace: extra
     parameters are either skip connections (address equality with an
     earlier output) or mul/add folded weights found by taint propagation
     from the parameter's first read, plus a trailing activation check on
     the pseudocode tail.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Protocol

from . import templates
from .errors import (
    ClassificationError,
    FusionResolutionError,
    TaintExhaustedError,
)
from .isa import Instruction, OpClass, is_immediate_token, is_memory_token
from .layouts import LayoutSpec

TVM_OPS = templates.TVM_OPS
GLOW_OPS = templates.GLOW_OPS

CANDIDATES_2_1 = templates.ELEMENTWISE_UNARY
CANDIDATES_2_2 = templates.ELEMENTWISE_BINARY
CANDIDATES_3_1 = templates.REDUCTIONS

ACTIVATIONS = ("relu", "clip")
FUSED_BASES = ("conv2d", "dense", "add", "concat", "transform")
SHUFFLE_TOKENS = ("reshape", "transpose", "reshape")


class Taxonomy:
    LAYOUT_INTER = "1.1"
    LAYOUT_INTRA = "1.2"
    ELEMENTWISE_2 = "2.1"
    ELEMENTWISE_3 = "2.2"
    REDUCTION = "3.1"
    COMPLEX = "4.1"


@dataclass(frozen=True)
class CoarseResult:
    taxonomy: str
    candidates: tuple[str, ...]

    @property
    def direct(self) -> bool:
        return len(self.candidates) == 1


@dataclass
class FusedType:
    """base . (mul|add|jumpadd)* . (shuffle)? . (activation)?"""

    base: str
    suffix: tuple[str, ...] = ()
    activation: tuple | None = None  # ('relu',) or ('clip', lo, hi)

    def __post_init__(self):
        for tok in self.suffix:
            if tok == "jumpadd" and self.base not in ("conv2d", "dense", "add"):
                raise ClassificationError(
                    f"jumpadd suffix not allowed on base {self.base}"
                )

    def as_string(self) -> str:
        parts = [self.base, *self.suffix]
        if self.activation:
            parts.append(self.activation[0])
        return "·".join(parts)

    @classmethod
    def parse(cls, text: str) -> "FusedType":
        parts = text.split("·")
        base = parts[0]
        suffix = []
        activation = None
        for tok in parts[1:]:
            if tok in ACTIVATIONS:
                activation = (tok,)
            else:
                suffix.append(tok)
        return cls(base=base, suffix=tuple(suffix), activation=activation)


class ClassifierBackend(Protocol):
    """What a pseudocode classifier must provide."""

    def classify(self, pseudocode: str, candidates: list[str]) -> str: ...

    def extract_attr(self, pseudocode: str, op: str, attribute: str): ...

    def check_activation(self, tail: str): ...


# ---------------------------------------------------------------------------
# coarse classification from parameter dims
# ---------------------------------------------------------------------------

def _is_flatten(a: LayoutSpec, b: LayoutSpec) -> bool:
    la, lb = a.logical_dims, b.logical_dims
    if len(la) == 4 and len(lb) == 2 and prod(la) == prod(lb) and la[0] == lb[0]:
        return True
    return False


def _is_expand(a_dims, b_dims) -> bool:
    """b equals a with exactly one inserted size-1 axis."""
    if len(b_dims) != len(a_dims) + 1:
        return False
    for i, d in enumerate(b_dims):
        if d == 1 and tuple(b_dims[:i]) + tuple(b_dims[i + 1 :]) == tuple(a_dims):
            return True
    return False


def _channels(spec: LayoutSpec) -> int:
    d = spec.logical_dims
    return d[1] if len(d) >= 2 else d[0]


def _kernel_match(params: list[LayoutSpec]):
    """conv2d when a 4-D kernel's in/out channels line up with data params."""
    if len(params) < 3:
        return None
    first, last = params[0], params[-1]
    if len(first.logical_dims) != 4 or len(last.logical_dims) != 4:
        return None
    for k, spec in enumerate(params[1:-1], start=1):
        d = spec.logical_dims
        if len(d) == 4 and d[2] == d[3] and d[1] == _channels(first) and d[0] == _channels(last):
            return k
    return None


def _dense_match(params: list[LayoutSpec]):
    if len(params) < 3:
        return None
    first, last = params[0], params[-1]
    if len(first.logical_dims) != 2 or len(last.logical_dims) != 2:
        return None
    for k, spec in enumerate(params[1:-1], start=1):
        d = spec.logical_dims
        if len(d) == 2 and d[1] == first.logical_dims[1] and d[0] == last.logical_dims[1]:
            return k
    return None


def coarse_classify(params: list[LayoutSpec]) -> CoarseResult:
    """Bucket an operator by its parameter dims (pure function of dims)."""
    n = len(params)
    numels = [prod(p.logical_dims) for p in params]

    if _kernel_match(params) is not None:
        return CoarseResult(Taxonomy.COMPLEX, ("conv2d",))
    if _dense_match(params) is not None:
        return CoarseResult(Taxonomy.COMPLEX, ("dense",))

    if n == 2:
        a, b = params
        if a.logical_dims == b.logical_dims:
            if a.stored_dims != b.stored_dims:
                # same logical tensor stored differently: layout transform
                return CoarseResult(Taxonomy.LAYOUT_INTRA, ("transform",))
            return CoarseResult(Taxonomy.ELEMENTWISE_2, CANDIDATES_2_1)
        if numels[0] == numels[1]:
            if _is_flatten(a, b):
                return CoarseResult(Taxonomy.LAYOUT_INTRA, ("flatten",))
            if _is_expand(a.stored_dims, b.stored_dims):
                return CoarseResult(Taxonomy.LAYOUT_INTRA, ("expand_dim",))
            if len(a.stored_dims) == len(b.stored_dims) and \
                    sorted(a.stored_dims) == sorted(b.stored_dims):
                return CoarseResult(Taxonomy.LAYOUT_INTRA, ("transpose",))
            return CoarseResult(Taxonomy.LAYOUT_INTRA, ("reshape",))
        if numels[1] < numels[0]:
            return CoarseResult(Taxonomy.REDUCTION, CANDIDATES_3_1)
        la, lb = a.logical_dims, b.logical_dims
        if (
            len(la) == 4
            and len(lb) == 4
            and la[:2] == lb[:2]
            and lb[2] >= la[2]
            and lb[3] >= la[3]
        ):
            return CoarseResult(Taxonomy.LAYOUT_INTRA, ("pad",))
        return CoarseResult(Taxonomy.LAYOUT_INTRA, ("reshape",))

    if n >= 3:
        # multi-tensor layout ops: channel bookkeeping decides the direction
        chans = [_channels(p) for p in params]
        if n >= 3 and sum(chans[:-1]) == chans[-1] and len({len(p.logical_dims) for p in params}) == 1:
            return CoarseResult(Taxonomy.LAYOUT_INTER, ("concat",))
        if n >= 3 and sum(chans[1:]) == chans[0] and numels[0] == sum(numels[1:]):
            return CoarseResult(Taxonomy.LAYOUT_INTER, ("split",))
        if n == 3:
            a, b, out = params
            if a.logical_dims == out.logical_dims and (
                b.logical_dims == out.logical_dims
                or prod(b.logical_dims) in (1, _channels(out))
            ):
                return CoarseResult(Taxonomy.ELEMENTWISE_3, CANDIDATES_2_2)
            if b.logical_dims == out.logical_dims and prod(a.logical_dims) in (1, _channels(out)):
                return CoarseResult(Taxonomy.ELEMENTWISE_3, CANDIDATES_2_2)

    # unresolvable dims: hand the whole list over, like the GLOW path
    return CoarseResult(Taxonomy.COMPLEX, TVM_OPS)


# ---------------------------------------------------------------------------
# fine classification
# ---------------------------------------------------------------------------

def fine_classify(bundle, candidates, backend) -> str:
    """Resolve an operator within its candidate list from the pseudocode."""
    candidates = list(candidates)
    if not candidates:
        raise ClassificationError("empty candidate list", fn=bundle.name)
    if len(candidates) == 1:
        return candidates[0]
    result = backend.classify(bundle.pseudocode, candidates)
    if result is None:
        raise ClassificationError(
            f"function {bundle.name}: no candidate pattern matched",
            fn=bundle.name,
            pseudocode=bundle.pseudocode,
            candidates=candidates,
        )
    if result not in candidates:
        raise ClassificationError(
            f"backend returned {result!r}, not in candidates {candidates}",
            fn=bundle.name,
            candidates=candidates,
        )
    return result


# ---------------------------------------------------------------------------
# taint propagation (Algorithm: follow the first read until mul/add)
# ---------------------------------------------------------------------------

def taint_until_arith(window, start_addr: int, seed_operands=None) -> str:
    """Walk a window from the first-read instruction, tracking tainted
    registers (plus one level of store/reload through matching memory
    tokens), until a mul or add consumes a tainted value.
    """
    insns: list[Instruction] = list(window)
    start = next((i for i, ins in enumerate(insns) if ins.addr == start_addr), None)
    if start is None:
        raise TaintExhaustedError(f"start address 0x{start_addr:x} not inside window")
    tainted: set[str] = set(seed_operands or [])
    first = insns[start]
    if first.opclass is OpClass.LOAD and first.operands:
        tainted.add(first.dest)
    if not tainted:
        raise TaintExhaustedError("no seed register at first-read instruction")
    tainted_mem: set[str] = set()
    for ins in insns[start + 1 :]:
        op = ins.opclass
        if op is OpClass.MOVE_IMM:
            tainted.discard(ins.dest)
        elif op is OpClass.LOAD:
            src = ins.sources[0] if ins.sources else ""
            if src in tainted_mem:
                tainted.add(ins.dest)
            else:
                tainted.discard(ins.dest)
        elif op is OpClass.STORE:
            if any(s in tainted for s in ins.sources):
                tainted_mem.add(ins.dest)
            else:
                tainted_mem.discard(ins.dest)
        elif op in (OpClass.MUL, OpClass.ADD):
            if any(s in tainted for s in ins.sources):
                return "mul" if op is OpClass.MUL else "add"
            tainted.discard(ins.dest)
        else:  # max/min/other and register moves propagate
            if any(s in tainted for s in ins.sources):
                tainted.add(ins.dest)
            else:
                tainted.discard(ins.dest)
    raise TaintExhaustedError(
        f"window ended without a tainted mul/add from 0x{start_addr:x}"
    )


# ---------------------------------------------------------------------------
# fused operator resolution
# ---------------------------------------------------------------------------

def resolve_fused(record, log, backend, prior_output_addrs) -> FusedType:
    """Classify each extra parameter of a conv/dense function and attach the
    trailing activation, yielding the full fused type."""
    base = record.base
    if base not in ("conv2d", "dense"):
        raise FusionResolutionError(f"{record.fn}: fused resolution needs conv/dense base")
    addrs = record.param_addrs
    suffix = []
    roles = []
    for idx in range(2, len(addrs) - 1):
        addr = addrs[idx]
        if addr in prior_output_addrs:
            suffix.append("jumpadd")
            roles.append("jumpadd")
            continue
        fr = log.first_read(record.fn, idx)
        win = log.window(record.fn)
        if fr is None or win is None:
            raise FusionResolutionError(
                f"{record.fn}: param {idx} has no first-read/window events"
            )
        try:
            kind = taint_until_arith(win.instructions, fr.insn_addr)
        except TaintExhaustedError as e:
            raise FusionResolutionError(
                f"{record.fn}: param {idx}: {e}"
            ) from e
        suffix.append(kind)
        roles.append(kind)
    activation = backend.check_activation(record.pseudocode)
    record.extra_roles = tuple(roles)
    return FusedType(base=base, suffix=tuple(suffix), activation=activation)


def attach_activation(base: str, pseudocode: str, backend) -> FusedType:
    """Activation-only fusion check for add/concat bases."""
    return FusedType(base=base, activation=backend.check_activation(pseudocode))
