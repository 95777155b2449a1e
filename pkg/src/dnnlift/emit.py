"""Expand a recovered computational graph into the primitive-only IR."""

from __future__ import annotations

from math import prod

import numpy as np

from .errors import EmissionError
from .graph import ComputationGraph, OperatorRecord
from .ir import IRNode, ModelIR

_COMMUTATIVE = ("add", "mul")


class _Emitter:
    def __init__(self, graph: ComputationGraph):
        self.graph = graph
        self.nodes: list[IRNode] = []
        self.final_ref: dict[str, object] = {}   # fn -> ref of its last IR node
        self.weights: dict[str, np.ndarray] = {}

    def _need(self, rec: OperatorRecord, key: str):
        if key not in rec.attrs:
            raise EmissionError(f"node {rec.fn}: missing attribute {key!r}")
        return rec.attrs[key]

    def _weight_key(self, rec: OperatorRecord, idx: int) -> str:
        key = f"{rec.fn}.p{idx}"
        arr = self.graph.weights.get((rec.fn, idx))
        if arr is None:
            raise EmissionError(f"node {rec.fn}: weight param {idx} was not recovered")
        self.weights[key] = np.asarray(arr, dtype=np.float32)
        return key

    def _input_ref(self, rec: OperatorRecord, idx: int):
        if self.graph.entry_addr is not None and \
                rec.param_addrs[idx] == self.graph.entry_addr:
            return "@input"
        producers = self.graph.producers_of(rec.fn)
        hit = producers.get(idx)
        if hit is None:
            raise EmissionError(f"node {rec.fn}: input param {idx} has no producer")
        producer_fn, slot = hit
        ref = self.final_ref[producer_fn]
        if isinstance(ref, tuple):  # split producer
            return [ref[0], slot]
        return ref

    def _emit(self, rec, k, op, inputs, weight=None, attrs=None) -> str:
        nid = f"{rec.fn}.{k}"
        self.nodes.append(IRNode(nid, op, inputs, weight, dict(attrs or {})))
        return nid

    def _activation(self, rec, k, ref, activation) -> str:
        if activation is None:
            return ref
        if activation[0] == "relu":
            return self._emit(rec, k, "relu", [ref])
        lo = activation[1] if len(activation) > 2 else rec.attrs.get("min", 0.0)
        hi = activation[2] if len(activation) > 2 else rec.attrs.get("max", 6.0)
        return self._emit(rec, k, "clip", [ref], attrs={"min": lo, "max": hi})

    def _shuffle_chain(self, rec, kstart, ref, dims, groups) -> str:
        n, c, h, w = dims
        r1 = self._emit(rec, kstart, "reshape", [ref],
                        attrs={"shape": [n, groups, c // groups, h, w]})
        t = self._emit(rec, kstart + 1, "transpose", [r1],
                       attrs={"perm": [0, 2, 1, 3, 4]})
        return self._emit(rec, kstart + 2, "reshape", [t], attrs={"shape": [n, c, h, w]})

    def emit_record(self, rec: OperatorRecord):
        base = rec.base
        fused = rec.fused
        k = 0
        if base in ("conv2d", "dense", "convdkkc8", "conv2d_relu", "conv2d_clip"):
            ref = self._input_ref(rec, 0)
            wkey = self._weight_key(rec, 1)
            if base == "dense":
                ref = self._emit(rec, k, "dense", [ref], weight=wkey)
            else:
                attrs = {"stride": self._need(rec, "stride"),
                         "padding": self._need(rec, "padding")}
                ref = self._emit(rec, k, "conv2d", [ref], weight=wkey, attrs=attrs)
            k += 1
            extras = rec.extra_roles or tuple(
                "add" for _ in range(len(rec.param_addrs) - 3)
            )
            for j, kind in enumerate(extras):
                idx = 2 + j
                if kind == "jumpadd":
                    other = self._input_ref(rec, idx)
                    ref = self._emit(rec, k, "add", [ref, other])
                else:
                    ref = self._emit(rec, k, kind, [ref],
                                     weight=self._weight_key(rec, idx))
                k += 1
            activation = fused.activation if fused else None
            if base == "conv2d_relu":
                activation = ("relu",)
            elif base == "conv2d_clip":
                activation = ("clip", rec.attrs.get("min", 0.0), rec.attrs.get("max", 6.0))
            ref = self._activation(rec, k, ref, activation)
            self.final_ref[rec.fn] = ref
            return

        if base == "concat":
            order = rec.attrs.get("order", list(range(len(rec.param_addrs) - rec.n_outputs)))
            ins = [self._input_ref(rec, slot) for slot in order]
            ref = self._emit(rec, 0, "concat", ins)
            k = 1
            groups = rec.attrs.get("shuffle_groups")
            if groups:
                out_spec = rec.param_layouts[len(rec.param_addrs) - rec.n_outputs]
                if rec.n_outputs > 1:
                    full_c = sum(
                        rec.param_layouts[len(rec.param_addrs) - rec.n_outputs + s].logical_dims[1]
                        for s in range(rec.n_outputs)
                    )
                    dims = list(out_spec.logical_dims)
                    dims[1] = full_c
                else:
                    dims = list(out_spec.logical_dims)
                ref = self._shuffle_chain(rec, k, ref, dims, groups)
                k += 3
            ref = self._activation(rec, k, ref, fused.activation if fused else None)
            k += 1
            if rec.n_outputs > 1:
                sections = self._need(rec, "sections")
                ref = self._emit(rec, k, "split", [ref], attrs={"sections": sections})
                self.final_ref[rec.fn] = (ref, rec.n_outputs)
                return
            self.final_ref[rec.fn] = ref
            return

        if base == "split":
            ref = self._input_ref(rec, 0)
            sections = rec.attrs.get("sections")
            if sections is None:
                sections = [
                    rec.param_layouts[i].logical_dims[1]
                    for i in range(1, len(rec.param_addrs))
                ]
            nid = self._emit(rec, 0, "split", [ref], attrs={"sections": sections})
            self.final_ref[rec.fn] = (nid, rec.n_outputs)
            return

        if rec.taxonomy == "2.2" or base in ("add", "sub", "mul", "div", "power"):
            refs = []
            weight = None
            for idx in (0, 1):
                if rec.roles[idx] == "weight":
                    if weight is not None or (idx == 0 and base not in _COMMUTATIVE):
                        raise EmissionError(
                            f"node {rec.fn}: unsupported weight operand placement"
                        )
                    weight = self._weight_key(rec, idx)
                else:
                    refs.append(self._input_ref(rec, idx))
            ref = self._emit(rec, 0, base, refs, weight=weight)
            ref = self._activation(rec, 1, ref, fused.activation if fused else None)
            self.final_ref[rec.fn] = ref
            return

        ref = self._input_ref(rec, 0)
        out_idx = len(rec.param_addrs) - 1
        out_dims = (
            rec.param_layouts[out_idx].logical_dims
            if rec.param_layouts and rec.param_layouts[out_idx] is not None
            else None
        )
        if base in ("relu", "softmax", "sqrt", "rsqrt", "exp", "neg", "abs", "flatten"):
            ref = self._emit(rec, 0, base, [ref])
        elif base == "clip":
            ref = self._emit(rec, 0, "clip", [ref],
                             attrs={"min": self._need(rec, "min"),
                                    "max": self._need(rec, "max")})
        elif base == "lrn":
            ref = self._emit(rec, 0, "lrn", [ref], attrs={
                "size": self._need(rec, "size"), "alpha": self._need(rec, "alpha"),
                "beta": self._need(rec, "beta"), "bias": self._need(rec, "bias")})
        elif base in ("maxpool", "avgpool"):
            ref = self._emit(rec, 0, base, [ref], attrs={
                "kernel": self._need(rec, "kernel"),
                "stride": self._need(rec, "stride"),
                "padding": self._need(rec, "padding")})
        elif base in ("sum", "max"):
            ref = self._emit(rec, 0, base, [ref], attrs={"axes": [2, 3]})
        elif base == "pad":
            ref = self._emit(rec, 0, "pad", [ref], attrs={
                "pad_h": self._need(rec, "pad_h"), "pad_w": self._need(rec, "pad_w")})
        elif base in ("reshape", "tensor_transformation"):
            if out_dims is None:
                raise EmissionError(f"node {rec.fn}: reshape without output dims")
            ref = self._emit(rec, 0, "reshape", [ref], attrs={"shape": list(out_dims)})
        elif base == "transform":
            groups = rec.attrs.get("shuffle_groups")
            if groups:
                ref = self._shuffle_chain(rec, 0, ref, list(out_dims), groups)
            else:
                ref = self._emit(rec, 0, "reshape", [ref], attrs={"shape": list(out_dims)})
        elif base == "transpose":
            ref = self._emit(rec, 0, "transpose", [ref],
                             attrs={"perm": self._need(rec, "perm")})
        elif base == "expand_dim":
            ref = self._emit(rec, 0, "expand_dim", [ref],
                             attrs={"axis": self._need(rec, "axis")})
        else:
            raise EmissionError(f"node {rec.fn}: cannot emit base {base!r}")
        ref = self._activation(rec, 1, ref, fused.activation if fused else None)
        self.final_ref[rec.fn] = ref


def emit_ir(graph: ComputationGraph, input_shape=None) -> ModelIR:
    """Expand the graph into primitive IR nodes, in execution order."""
    if input_shape is None:
        if graph.entry is None:
            raise EmissionError("graph has no entry; supply input_shape")
        fn, idx = graph.entry
        spec = graph.node(fn).param_layouts[idx]
        if spec is None:
            raise EmissionError("entry parameter has no recovered dims")
        input_shape = spec.logical_dims
    em = _Emitter(graph)
    for rec in graph.nodes:
        if rec.base is None:
            raise EmissionError(f"node {rec.fn}: unclassified (cannot emit)")
        em.emit_record(rec)
    ir = ModelIR(nodes=em.nodes, input_shape=tuple(input_shape), weights=em.weights)
    return ir
