"""Computational-graph reconstruction from traced parameter addresses.

Producers and consumers are linked by address equality: each input address
binds to the most recent prior operator whose output address equals it, so
reused activation buffers resolve to the correct writer.  Unmatched inputs
become weight slots when their role says so (or when a two-operand
elementwise op carries a broadcast-shaped operand); the single remaining
unmatched tensor input is the graph entry.

Also hosts the split-operator repair: a compiler occasionally emits one
logical operator as two functions whose second stage works in place
(output address == input address), which never happens for whole operators,
so (pattern, in-place, address chaining) identifies the pairs to merge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import templates
from .classify import FusedType
from .errors import GraphAmbiguityError, NotTracedError, TraceCorruptionError
from .layouts import LayoutSpec, reorder_weights


@dataclass
class OperatorRecord:
    """Per-function result, accreted stage by stage."""

    seq: int
    fn: str
    base: str | None = None
    fused: FusedType | None = None
    taxonomy: str | None = None
    candidates: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)
    param_addrs: tuple[int, ...] = ()
    param_layouts: tuple = ()           # LayoutSpec | None per param
    param_dtypes: tuple[str, ...] = ()
    roles: tuple[str, ...] = ()
    extra_roles: tuple[str, ...] = ()
    pseudocode: str = ""
    origin: str = "tvm"
    n_outputs: int = 1
    error: str | None = None
    absorbed: tuple[str, ...] = ()
    dump_overrides: dict = field(default_factory=dict)  # param idx -> (fn, idx)

    @property
    def fused_string(self) -> str:
        if self.fused is not None:
            return self.fused.as_string()
        return self.base or "?"

    @property
    def output_addrs(self) -> tuple[int, ...]:
        return self.param_addrs[len(self.param_addrs) - self.n_outputs :]

    def input_indices(self):
        return [i for i, r in enumerate(self.roles) if r in ("input", "jumpadd", "tensor")]

    def weight_indices(self):
        return [i for i, r in enumerate(self.roles) if r == "weight"]

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "fn": self.fn,
            "base": self.base,
            "fused": self.fused_string if self.base else None,
            "taxonomy": self.taxonomy,
            "candidates": list(self.candidates),
            "attrs": self.attrs,
            "param_addrs": [f"0x{a:x}" for a in self.param_addrs],
            "param_layouts": [s.to_json() if s else None for s in self.param_layouts],
            "param_dtypes": list(self.param_dtypes),
            "roles": list(self.roles),
            "extra_roles": list(self.extra_roles),
            "n_outputs": self.n_outputs,
            "error": self.error,
            "absorbed": list(self.absorbed),
            "dump_overrides": {
                str(k): [fn, idx] for k, (fn, idx) in self.dump_overrides.items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict, pseudocode: str = "", origin: str = "tvm") -> "OperatorRecord":
        fused = FusedType.parse(obj["fused"]) if obj.get("fused") else None
        return cls(
            seq=int(obj["seq"]),
            fn=obj["fn"],
            base=obj.get("base"),
            fused=fused,
            taxonomy=obj.get("taxonomy"),
            candidates=tuple(obj.get("candidates", [])),
            attrs=dict(obj.get("attrs", {})),
            param_addrs=tuple(int(a, 16) for a in obj.get("param_addrs", [])),
            param_layouts=tuple(
                LayoutSpec.from_json(s) if s else None
                for s in obj.get("param_layouts", [])
            ),
            param_dtypes=tuple(obj.get("param_dtypes", [])),
            roles=tuple(obj.get("roles", [])),
            extra_roles=tuple(obj.get("extra_roles", [])),
            n_outputs=int(obj.get("n_outputs", 1)),
            error=obj.get("error"),
            absorbed=tuple(obj.get("absorbed", [])),
            dump_overrides={
                int(k): (v[0], int(v[1]))
                for k, v in obj.get("dump_overrides", {}).items()
            },
            pseudocode=pseudocode,
            origin=origin,
        )


def record_tensor(log, rec: OperatorRecord, idx: int):
    """Dump lookup honoring merged-record source remapping."""
    fn, src_idx = rec.dump_overrides.get(idx, (rec.fn, idx))
    return log.tensor(fn, src_idx)


CONV_FAMILY = ("conv2d", "dense", "convdkkc8", "conv2d_relu", "conv2d_clip")


def assign_roles(record: OperatorRecord) -> OperatorRecord:
    n = len(record.param_addrs)
    base = record.base
    if base in CONV_FAMILY:
        extras = record.extra_roles
        if not extras:
            extras = tuple("weight" for _ in range(n - 3))
        roles = ["input", "weight"]
        for r in extras:
            roles.append("jumpadd" if r == "jumpadd" else "weight")
        roles.append("output")
        if len(roles) != n:
            roles = ["input", "weight"] + ["weight"] * (n - 3) + ["output"]
    elif base == "concat":
        roles = ["input"] * (n - 1) + ["output"]
    elif base == "split":
        record.n_outputs = n - 1
        roles = ["input"] + ["output"] * (n - 1)
    elif record.taxonomy == "2.2":
        roles = ["tensor", "tensor", "output"]
    else:
        roles = ["input"] * (n - 1) + ["output"]
    record.roles = tuple(roles)
    return record


@dataclass(frozen=True)
class Edge:
    producer: str
    producer_slot: int
    consumer: str
    input_slot: int   # index into the consumer's input param positions

    def to_json(self):
        return {
            "producer": self.producer,
            "producer_slot": self.producer_slot,
            "consumer": self.consumer,
            "input_slot": self.input_slot,
        }


@dataclass
class ComputationGraph:
    nodes: list[OperatorRecord]
    edges: list[Edge]
    entry: tuple[str, int] | None      # (consumer fn, param index) of the model input
    entry_addr: int | None
    weights: dict = field(default_factory=dict)   # (fn, param_index) -> ndarray

    def node(self, fn: str) -> OperatorRecord:
        for n in self.nodes:
            if n.fn == fn:
                return n
        raise KeyError(fn)

    def producers_of(self, fn: str) -> dict[int, tuple[str, int]]:
        return {
            e.input_slot: (e.producer, e.producer_slot)
            for e in self.edges
            if e.consumer == fn
        }

    def to_json(self) -> dict:
        return {
            "nodes": [n.to_json() for n in self.nodes],
            "edges": [e.to_json() for e in self.edges],
            "entry": list(self.entry) if self.entry else None,
            "entry_addr": f"0x{self.entry_addr:x}" if self.entry_addr else None,
        }


def build_graph(log, records: list[OperatorRecord]) -> ComputationGraph:
    """Link operator records into a DAG by matching parameter addresses."""
    ordered = sorted(records, key=lambda r: r.seq)
    writers: dict[int, tuple[str, int, int]] = {}  # addr -> (fn, out_slot, seq)
    edges: list[Edge] = []
    entry_candidates: dict[int, tuple[str, int]] = {}
    maybe_weights: list[tuple[OperatorRecord, int, int]] = []
    for rec in ordered:
        if not rec.roles:
            assign_roles(rec)
        n = len(rec.param_addrs)
        out_start = n - rec.n_outputs
        roles = list(rec.roles)
        for idx in range(out_start):
            addr = rec.param_addrs[idx]
            role = roles[idx]
            hit = writers.get(addr)
            if hit is not None:
                if hit[0] == rec.fn:
                    raise TraceCorruptionError(
                        f"{rec.fn}: input address 0x{addr:x} produced by itself"
                    )
                edges.append(Edge(hit[0], hit[1], rec.fn, idx))
                if role in ("weight", "tensor"):
                    # address matching outranks the static guess
                    roles[idx] = "input"
                continue
            if role == "weight":
                continue
            if role == "tensor":
                # unmatched elementwise operand: broadcast-shaped is clearly
                # a weight; full-size operands are resolved after the scan
                spec = rec.param_layouts[idx] if idx < len(rec.param_layouts) else None
                out_spec = rec.param_layouts[out_start] if rec.param_layouts else None
                if spec and out_spec and np.prod(spec.logical_dims) != np.prod(out_spec.logical_dims):
                    roles[idx] = "weight"
                else:
                    maybe_weights.append((rec, idx, addr))
                continue
            entry_candidates[addr] = (rec.fn, idx)
        for slot in range(rec.n_outputs):
            writers[rec.param_addrs[out_start + slot]] = (rec.fn, slot, rec.seq)
        rec.roles = tuple(roles)

    # elementwise operands that matched nothing: weights, unless they are the
    # only candidate for the model input
    if not entry_candidates and maybe_weights:
        addrs = {addr for _, _, addr in maybe_weights}
        if len(addrs) > 1:
            listing = ", ".join(
                f"{rec.fn}[{idx}]@0x{addr:x}" for rec, idx, addr in maybe_weights
            )
            raise GraphAmbiguityError(f"multiple unmatched tensor inputs: {listing}")
        rec, idx, addr = maybe_weights[0]
        entry_candidates[addr] = (rec.fn, idx)
        maybe_weights = [
            (r, i, a) for r, i, a in maybe_weights[1:] if a != addr
        ]
    for rec, idx, _addr in maybe_weights:
        roles = list(rec.roles)
        roles[idx] = "weight"
        rec.roles = tuple(roles)

    if len(entry_candidates) > 1:
        listing = ", ".join(
            f"{fn}[{idx}]@0x{addr:x}" for addr, (fn, idx) in sorted(entry_candidates.items())
        )
        raise GraphAmbiguityError(f"multiple unmatched tensor inputs: {listing}")
    entry = None
    entry_addr = None
    if entry_candidates:
        entry_addr, entry = next(iter(entry_candidates.items()))
    for rec in ordered:
        rec.roles = tuple("input" if r == "tensor" else r for r in rec.roles)
    graph = ComputationGraph(nodes=ordered, edges=edges, entry=entry, entry_addr=entry_addr)
    _check_acyclic(graph)
    return graph


def _check_acyclic(graph: ComputationGraph):
    seq = {n.fn: n.seq for n in graph.nodes}
    for e in graph.edges:
        if seq[e.producer] >= seq[e.consumer]:
            raise TraceCorruptionError(
                f"edge {e.producer} -> {e.consumer} violates execution order"
            )


def recover_weights(log, graph: ComputationGraph, quantized: bool = False):
    """Dump weight parameters and reorder them into standard layout.

    Non-quantized weights stay bit-identical to the stored data (layout
    adjustment is a pure permutation).  Integer dumps under a non-quantized
    model are kept but flagged.
    """
    warnings_out = []
    for rec in graph.nodes:
        for idx in rec.weight_indices():
            try:
                arr = record_tensor(log, rec, idx)
            except NotTracedError:
                raise
            spec = rec.param_layouts[idx] if idx < len(rec.param_layouts) else None
            if spec is None:
                spec = LayoutSpec(kind="nchw", stored_dims=arr.shape, logical_dims=arr.shape)
            if arr.dtype.kind == "i" and not quantized:
                warnings_out.append(
                    f"{rec.fn} param {idx}: integer weight dump in a "
                    f"non-quantized model (dtype {arr.dtype})"
                )
            graph.weights[(rec.fn, idx)] = reorder_weights(arr, spec)
    return warnings_out


# ---------------------------------------------------------------------------
# split-operator repair
# ---------------------------------------------------------------------------

def _is_inplace(rec: OperatorRecord) -> bool:
    if len(rec.param_addrs) < 2:
        return False
    out = rec.param_addrs[-1]
    return out in rec.param_addrs[:-1]


def _merge_records(first: OperatorRecord, second: OperatorRecord, base: str,
                   fused: FusedType, attrs: dict | None = None,
                   extra_param: int | None = None) -> OperatorRecord:
    """Build the merged record; the second stage ran in place, so the merged
    output is the first stage's output buffer."""
    params = [first.param_addrs[0]]
    layouts = [first.param_layouts[0] if first.param_layouts else None]
    dtypes = [first.param_dtypes[0] if first.param_dtypes else "f32"]
    roles = ["input"]
    if base == "dense":
        params.append(first.param_addrs[1])
        layouts.append(first.param_layouts[1])
        dtypes.append(first.param_dtypes[1])
        roles.append("weight")
    if extra_param is not None:
        params.append(second.param_addrs[extra_param])
        layouts.append(second.param_layouts[extra_param] if second.param_layouts else None)
        dtypes.append(second.param_dtypes[extra_param] if second.param_dtypes else "f32")
        roles.append("weight")
    params.append(first.param_addrs[-1])
    layouts.append(first.param_layouts[-1] if first.param_layouts else None)
    dtypes.append(first.param_dtypes[-1] if first.param_dtypes else "f32")
    roles.append("output")
    overrides = {0: (first.fn, 0)}
    if extra_param is not None:
        overrides[len(params) - 2] = (second.fn, extra_param)
    # the final value was dumped as the in-place second stage's output
    overrides[len(params) - 1] = (second.fn, len(second.param_addrs) - 1)
    merged = OperatorRecord(
        seq=first.seq,
        fn=first.fn,
        base=base,
        fused=fused,
        taxonomy=first.taxonomy,
        candidates=(base,),
        attrs=dict(attrs or {}),
        param_addrs=tuple(params),
        param_layouts=tuple(layouts),
        param_dtypes=tuple(dtypes),
        roles=tuple(roles),
        pseudocode=first.pseudocode + "\n" + second.pseudocode,
        origin=first.origin,
        absorbed=(second.fn,),
        dump_overrides=overrides,
    )
    return merged


def fix_split_ops(records: list[OperatorRecord]):
    """Merge consecutive function pairs matching the known split patterns
    (softmax, avgpool, dense+bias).  Returns (records, fixes, diagnostics);
    idempotent because merged records no longer contain an in-place stage."""
    ordered = sorted(records, key=lambda r: r.seq)
    out: list[OperatorRecord] = []
    fixes: list[str] = []
    diagnostics: list[str] = []
    i = 0
    while i < len(ordered):
        rec = ordered[i]
        nxt = ordered[i + 1] if i + 1 < len(ordered) else None
        merged = None
        if nxt is not None and _is_inplace(nxt) and not rec.absorbed:
            chained = nxt.param_addrs[0] == rec.param_addrs[-1]
            if chained and rec.base == "exp" and templates.is_sum_normalize(nxt.pseudocode):
                merged = _merge_records(rec, nxt, "softmax", FusedType("softmax"))
                fixes.append(f"merged {rec.fn}+{nxt.fn} into softmax")
            elif chained and rec.base == "sum":
                scale = templates.is_pool_scale(nxt.pseudocode)
                if scale is not None:
                    merged = _merge_records(rec, nxt, "avgpool", FusedType("avgpool"))
                    fixes.append(f"merged {rec.fn}+{nxt.fn} into avgpool")
            elif chained and rec.base == "dense" and nxt.base == "add":
                bias_idx = next(
                    (k for k, a in enumerate(nxt.param_addrs[:-1])
                     if a != nxt.param_addrs[-1]),
                    None,
                )
                if bias_idx is not None:
                    merged = _merge_records(
                        rec, nxt, "dense",
                        FusedType("dense", suffix=("add",)),
                        extra_param=bias_idx,
                    )
                    merged.extra_roles = ("add",)
                    fixes.append(f"merged {rec.fn}+{nxt.fn} into dense·add")
            if merged is None and chained:
                diagnostics.append(
                    f"{nxt.fn} runs in place after {rec.fn} but matches no "
                    f"known split pattern"
                )
        if merged is not None:
            out.append(merged)
            i += 2
        else:
            out.append(rec)
            i += 1
    return out, fixes, diagnostics
