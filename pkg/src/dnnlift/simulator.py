"""Synthetic DL compiler and instrumenter.

Lowers a reference model into the same artifacts a real toolchain leaves
behind: a Function Bundle file (opaque names, descriptor streams, rendered
pseudocode), a dynamic trace (calls, first reads, taint windows, tensor
dumps), and a ground-truth manifest for round-trip comparison.  Fusion,
NCHWc/kernel blocking, buffer reuse, quantized weights with embedded
shift-multiplication constants, and the known fault modes are all modeled.

Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from . import ops, templates
from .bundles import FunctionBundle, ParamRecord, descriptor_instructions, save_bundle_file
from .classify import FusedType
from .errors import CompileError
from .isa import Instruction, OpClass
from .layouts import (
    LayoutSpec,
    block_weights,
    glow_c8_spec,
    identity_spec,
    kernel_blocked_spec,
    nchwc_spec,
)
from .trace import (
    CallEvent,
    FirstReadEvent,
    InsnWindowEvent,
    TensorDumpEvent,
    TraceLog,
    save_trace,
)

SHIFT_EXP = 0x28  # all embedded multipliers use value = HEX / 2**40


# ---------------------------------------------------------------------------
# reference models
# ---------------------------------------------------------------------------

@dataclass
class RefNode:
    id: str
    op: str
    inputs: list[str]
    attrs: dict = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class RefModel:
    input_shape: tuple[int, ...]
    nodes: list[RefNode]

    def node(self, node_id: str) -> RefNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)


class ModelBuilder:
    """Shape-tracking builder for reference models."""

    def __init__(self, input_shape, seed=0):
        self.input_shape = tuple(input_shape)
        self.rng = np.random.default_rng(seed)
        self.nodes: list[RefNode] = []
        self.shapes: dict[str, tuple[int, ...]] = {"@input": self.input_shape}
        self._n = 0

    def _weight(self, shape, scale=None):
        if scale is None:
            fan_in = prod(shape[1:]) if len(shape) > 1 else shape[0]
            scale = 1.0 / max(fan_in, 1) ** 0.5
        return (self.rng.standard_normal(shape) * scale).astype(np.float32)

    def _add(self, op, inputs, attrs=None, weights=None) -> str:
        self._n += 1
        nid = f"n{self._n}_{op}"
        node = RefNode(nid, op, list(inputs), dict(attrs or {}), dict(weights or {}))
        self.nodes.append(node)
        self.shapes[nid] = self._infer(node)
        return nid

    def _infer(self, node: RefNode) -> tuple[int, ...]:
        op = node.op
        shp = [self.shapes[i] for i in node.inputs]
        a = node.attrs
        if op == "conv2d":
            n, c, h, w = shp[0]
            o = node.weights["kernel"].shape[0]
            k, s, p = a["kernel"], a["stride"], a["padding"]
            return (n, o, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        if op in ("maxpool", "avgpool"):
            n, c, h, w = shp[0]
            k, s, p = a["kernel"], a["stride"], a["padding"]
            return (n, c, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        if op == "dense":
            return (shp[0][0], node.weights["kernel"].shape[0])
        if op == "flatten":
            return (shp[0][0], prod(shp[0][1:]))
        if op == "reshape":
            return tuple(a["shape"])
        if op == "transpose":
            return tuple(shp[0][i] for i in a["perm"])
        if op == "expand_dim":
            s = list(shp[0])
            s.insert(a["axis"], 1)
            return tuple(s)
        if op == "pad":
            n, c, h, w = shp[0]
            return (n, c, h + 2 * a["pad_h"], w + 2 * a["pad_w"])
        if op == "concat":
            c = sum(s[1] for s in shp)
            return (shp[0][0], c) + tuple(shp[0][2:])
        if op == "split":
            return shp[0]  # per-section shapes tracked via attrs
        if op in ("sum", "max"):
            n, c, h, w = shp[0]
            return (n, c, 1, 1)
        return shp[0]

    # --- node helpers ---

    def conv(self, x, out_c, kernel, stride=1, padding=0):
        in_c = self.shapes[x][1]
        w = self._weight((out_c, in_c, kernel, kernel))
        return self._add("conv2d", [x], {"kernel": kernel, "stride": stride, "padding": padding},
                         {"kernel": w})

    def bias(self, x):
        c = self.shapes[x][1]
        return self._add("add", [x], weights={"vec": self._weight((c,))})

    def scale(self, x):
        c = self.shapes[x][1]
        v = (self.rng.uniform(0.5, 1.5, c)).astype(np.float32)
        return self._add("mul", [x], weights={"vec": v})

    def residual(self, x, other):
        return self._add("add", [x, other])

    def binary(self, op, x, y):
        return self._add(op, [x, y])

    def relu(self, x):
        return self._add("relu", [x])

    def clip(self, x, lo=0.0, hi=6.0):
        return self._add("clip", [x], {"min": lo, "max": hi})

    def unary(self, op, x, attrs=None):
        return self._add(op, [x], attrs or {})

    def lrn(self, x, size=5, alpha=1e-4, beta=0.75, bias_c=1.0):
        return self._add("lrn", [x], {"size": size, "alpha": alpha, "beta": beta, "bias": bias_c})

    def maxpool(self, x, kernel, stride, padding=0):
        return self._add("maxpool", [x], {"kernel": kernel, "stride": stride, "padding": padding})

    def avgpool(self, x, kernel, stride, padding=0):
        return self._add("avgpool", [x], {"kernel": kernel, "stride": stride, "padding": padding})

    def pad(self, x, pad_h, pad_w):
        return self._add("pad", [x], {"pad_h": pad_h, "pad_w": pad_w})

    def concat(self, xs):
        return self._add("concat", list(xs))

    def shuffle(self, x, groups):
        return self._add("shuffle", [x], {"shuffle_groups": groups})

    def split(self, x, sections):
        """Returns one reference per section (``<id>#<k>``)."""
        nid = self._add("split", [x], {"sections": list(sections)})
        in_shape = self.shapes[x]
        refs = []
        for k, sec in enumerate(sections):
            ref = f"{nid}#{k}"
            self.shapes[ref] = (in_shape[0], sec) + tuple(in_shape[2:])
            refs.append(ref)
        return refs

    def flatten(self, x):
        return self._add("flatten", [x])

    def reshape(self, x, shape):
        return self._add("reshape", [x], {"shape": list(shape)})

    def transpose(self, x, perm):
        return self._add("transpose", [x], {"perm": list(perm)})

    def expand_dim(self, x, axis):
        return self._add("expand_dim", [x], {"axis": axis})

    def dense(self, x, out_f):
        in_f = self.shapes[x][1]
        return self._add("dense", [x], weights={"kernel": self._weight((out_f, in_f))})

    def softmax(self, x):
        return self._add("softmax", [x])

    def reduce(self, op, x):
        return self._add(op, [x])

    def build(self) -> RefModel:
        return RefModel(self.input_shape, list(self.nodes))


@dataclass
class QuantSpec:
    mode: str                 # 'global_scale' | 'kl_divergence'
    scale: float = 0.02
    multiple_range: tuple = (0.5, 2.0)

    def to_json(self):
        return {"mode": self.mode, "scale": self.scale,
                "multiple_range": list(self.multiple_range)}


@dataclass
class CompileOptions:
    origin: str = "tvm"
    opt_level: str = "O0"
    nchwc_block: int = 0
    kernel_blocks: tuple = (0, 0)
    quantize: QuantSpec | None = None
    reuse_buffers: bool = False
    seed: int = 0
    faults: tuple = ()

    @property
    def fuse(self) -> bool:
        # full optimization implies fusion for tvm; glow fuses conv+activation only
        return self.opt_level == "O3" and self.origin == "tvm"


# ---------------------------------------------------------------------------
# lowering
# ---------------------------------------------------------------------------

@dataclass
class ParamEntry:
    role: str                   # input | weight | jumpadd | output
    layout: LayoutSpec
    dtype: str = "f32"
    data: np.ndarray | None = None   # stored-layout weight data (quantized if enabled)
    fdata: np.ndarray | None = None  # original float weight, standard layout
    src: str | None = None           # producer fn ("@input" for the entry) for inputs
    src_slot: int = 0
    node: str | None = None          # RefModel node carrying the weight / output


@dataclass
class FnSpec:
    name: str
    entry: int
    group: list[RefNode]
    base: str
    fused: FusedType
    params: list[ParamEntry]
    attrs: dict
    pseudocode: str = ""
    extras: tuple = ()               # ('add'|'mul'|'jumpadd') in param order
    quant_scale: float | None = None      # per-layer s_l
    quant_mult: float | None = None       # embedded (confused) multiplier
    quant_confusion: float | None = None  # c_l, ground truth multiple
    stage_op: str | None = None      # execution override for split stages
    fault: str | None = None


@dataclass
class Plan:
    model: RefModel
    opts: CompileOptions
    fns: list[FnSpec]
    quant: dict = field(default_factory=dict)

    def fn_of_node(self, node_id: str) -> tuple[str, int]:
        """(fn name, output slot) producing a model node's value."""
        for fn in self.fns:
            outs = [p for p in fn.params if p.role == "output"]
            for slot, p in enumerate(outs):
                if p.node == node_id:
                    return fn.name, slot
        raise KeyError(node_id)


def _consumers(model: RefModel) -> dict[str, list[str]]:
    cons: dict[str, list[str]] = {}
    for n in model.nodes:
        for i in n.inputs:
            cons.setdefault(i, []).append(n.id)
    return cons


def _blocked_capable(op: str) -> bool:
    return op in ("conv2d", "maxpool", "avgpool", "relu", "clip", "add", "mul",
                  "sub", "div", "lrn", "concat", "pad", "shuffle")


class _Lowerer:
    def __init__(self, model: RefModel, opts: CompileOptions):
        if opts.quantize is not None and not opts.fuse:
            raise CompileError("quantized lowering requires tvm at O3 (fused)")
        self.model = model
        self.opts = opts
        self.rng = np.random.default_rng(opts.seed)
        self.shapes = self._shapes()
        self.consumers = _consumers(model)
        self.fns: list[FnSpec] = []
        self.entry = 0x401000
        self.node_fn: dict[str, tuple[str, int]] = {}
        self.node_layout: dict[str, LayoutSpec] = {}
        self.quant: dict = {}
        self.faults_left = list(opts.faults)

    def _shapes(self):
        b = ModelBuilder(self.model.input_shape)
        shapes = {"@input": tuple(self.model.input_shape)}
        for n in self.model.nodes:
            b.shapes = shapes
            shapes[n.id] = b._infer(n)
            if n.op == "split":
                in_shape = shapes[n.inputs[0]]
                for k, sec in enumerate(n.attrs["sections"]):
                    shapes[f"{n.id}#{k}"] = (in_shape[0], sec) + tuple(in_shape[2:])
        return shapes

    def _take_fault(self, kind: str) -> bool:
        if kind in self.faults_left:
            self.faults_left.remove(kind)
            return True
        return False

    def _next_name(self) -> tuple[str, int]:
        entry = self.entry
        self.entry += 0x200
        return f"FUN_{entry:08x}", entry

    def _act_layout(self, node: RefNode, shape) -> LayoutSpec:
        c = self.opts.nchwc_block
        if (
            self.opts.origin == "tvm"
            and self.opts.opt_level == "O3"
            and c > 1
            and len(shape) == 4
            and shape[1] % c == 0
            and _blocked_capable(node.op)
        ):
            return nchwc_spec(*shape, block=c)
        return identity_spec(shape)

    def _kernel_layout(self, w: np.ndarray, glow_c8=False) -> LayoutSpec:
        o, i, k, _ = w.shape
        if glow_c8:
            return glow_c8_spec(o, i, k)
        a, b = self.opts.kernel_blocks
        if (
            self.opts.origin == "tvm"
            and self.opts.opt_level == "O3"
            and a > 1
            and o % a == 0
            and b >= 1
            and i % b == 0
            and (a > 1 or b > 1)
        ):
            return kernel_blocked_spec(o, i, k, a, b)
        return identity_spec(w.shape)

    def _quantize_layer(self, fn: FnSpec):
        q = self.opts.quantize
        if q is None:
            return
        kernel_entry = next(p for p in fn.params if p.role == "weight")
        w = kernel_entry.data
        if q.mode == "global_scale":
            s = float(q.scale)
            confusion = 1.0
        else:
            s = float(np.max(np.abs(w)) / 127.0)
            lo, hi = q.multiple_range
            confusion = float(self.rng.uniform(lo, hi))
        mult = s * confusion
        hexv = int(round(mult * (1 << 40)))
        fn.quant_scale = s
        fn.quant_confusion = confusion
        fn.quant_mult = hexv / float(1 << 40)
        fn.attrs["_quant_hex"] = hexv
        for p in fn.params:
            if p.role != "weight":
                continue
            if p.data.ndim >= 2:  # kernel
                p.data = np.clip(np.round(p.data / s), -127, 127).astype(np.int8)
                p.dtype = "i8"
            else:  # bias / scale vectors share the layer scale
                p.data = np.round(p.data / s).astype(np.int32)
                p.dtype = "i32"
        self.quant[fn.name] = {
            "scale": s,
            "confusion": confusion,
            "embedded": fn.quant_mult,
        }

    # --- group formation ---

    def lower(self) -> Plan:
        consumed: set[str] = set()
        for node in self.model.nodes:
            if node.id in consumed:
                continue
            if node.op == "shuffle":
                if self.opts.fuse:
                    raise CompileError(
                        "standalone channel shuffle at O3 must follow a concat"
                    )
                self._lower_shuffle_o0(node)
                consumed.add(node.id)
                continue
            group = [node]
            if self.opts.origin == "glow":
                group += self._absorb_glow(node, consumed)
            elif self.opts.fuse:
                group += self._absorb_tvm(node, consumed)
            consumed.update(n.id for n in group)
            self._emit_group(group)
        plan = Plan(self.model, self.opts, self.fns, self.quant)
        return plan

    def _sole_consumer(self, node_id: str, consumed) -> RefNode | None:
        cons = [c for c in self.consumers.get(node_id, []) if c not in consumed]
        if len(cons) != 1:
            return None
        return self.model.node(cons[0])

    def _absorb_tvm(self, node: RefNode, consumed) -> list[RefNode]:
        group: list[RefNode] = []
        if node.op in ("conv2d", "dense"):
            tail = node.id
            while True:
                nxt = self._sole_consumer(tail, consumed | {g.id for g in group})
                if nxt is None:
                    break
                if nxt.op in ("add", "mul") and (
                    "vec" in nxt.weights
                    or (nxt.op == "add" and len(nxt.inputs) == 2)
                ):
                    group.append(nxt)
                    tail = nxt.id
                    continue
                if nxt.op in ("relu", "clip") and nxt.inputs == [tail]:
                    group.append(nxt)
                break
        elif node.op == "add" and "vec" not in node.weights:
            nxt = self._sole_consumer(node.id, consumed)
            if nxt is not None and nxt.op in ("relu", "clip"):
                group.append(nxt)
        elif node.op == "concat":
            tail = node.id
            nxt = self._sole_consumer(tail, consumed)
            if nxt is not None and nxt.op == "shuffle":
                group.append(nxt)
                tail = nxt.id
                nxt = self._sole_consumer(tail, consumed | {n.id for n in group})
            if nxt is not None and nxt.op == "split" and group:
                group.append(nxt)
            elif nxt is not None and nxt.op in ("relu", "clip"):
                group.append(nxt)
        return group

    def _absorb_glow(self, node: RefNode, consumed) -> list[RefNode]:
        group: list[RefNode] = []
        if node.op in ("conv2d", "dense"):
            tail = node.id
            nxt = self._sole_consumer(tail, consumed)
            if nxt is not None and nxt.op == "add" and "vec" in nxt.weights:
                group.append(nxt)
                tail = nxt.id
                nxt = self._sole_consumer(tail, consumed | {n.id for n in group})
            if node.op == "conv2d" and nxt is not None and nxt.op in ("relu", "clip"):
                group.append(nxt)
        return group

    def _lower_shuffle_o0(self, node: RefNode):
        """O0 lowers a channel shuffle into reshape/transpose/reshape fns."""
        n, c, h, w = self.shapes[node.inputs[0]]
        g = node.attrs["shuffle_groups"]
        b = ModelBuilder((n, c, h, w))
        b.shapes = dict(self.shapes)
        r1 = RefNode(node.id + "_r1", "reshape", [node.inputs[0]], {"shape": [n, g, c // g, h, w]})
        t = RefNode(node.id + "_t", "transpose", [r1.id], {"perm": [0, 2, 1, 3, 4]})
        r2 = RefNode(node.id + "_r2", "reshape", [t.id], {"shape": [n, c, h, w]})
        self.shapes[r1.id] = (n, g, c // g, h, w)
        self.shapes[t.id] = (n, c // g, g, h, w)
        self.shapes[r2.id] = (n, c, h, w)
        for piece in (r1, t, r2):
            self._emit_group([piece])
        # downstream consumers refer to the shuffle node id
        self.node_fn[node.id] = self.node_fn[r2.id]
        self.node_layout[node.id] = self.node_layout[r2.id]

    # --- emission ---

    def _input_entry(self, ref: str) -> ParamEntry:
        if ref == "@input":
            layout = identity_spec(self.model.input_shape)
            return ParamEntry("input", layout, src="@input")
        fn, slot = self.node_fn[ref]
        return ParamEntry("input", self.node_layout[ref], src=fn, src_slot=slot)

    _PLAIN_NATIVE = ("flatten", "dense", "softmax", "reshape", "transpose",
                     "expand_dim", "sum", "max", "power", "sqrt", "rsqrt",
                     "exp", "neg", "abs")

    def _unblock_ref(self, ref: str) -> str:
        """Insert a layout-transform function when a plain-native consumer
        reads a channel-blocked buffer (what the real compiler does before
        flatten/dense)."""
        if ref == "@input":
            return ref
        layout = self.node_layout.get(ref)
        if layout is None or layout.kind != "nchwc":
            return ref
        new_ref = ref + "/unblocked"
        if new_ref in self.node_fn:
            return new_ref
        name, entry = self._next_name()
        plain = identity_spec(layout.logical_dims)
        src_fn, src_slot = self.node_fn[ref]
        params = [
            ParamEntry("input", layout, src=src_fn, src_slot=src_slot),
            ParamEntry("output", plain, node=new_ref),
        ]
        spec = templates.RenderSpec(
            base="transform", params=2,
            in_dims=layout.stored_dims, out_dims=layout.logical_dims,
        )
        fn = FnSpec(name=name, entry=entry, group=[], base="transform",
                    fused=FusedType("transform"), params=params, attrs={},
                    stage_op=f"alias:{ref}")
        fn.pseudocode = templates.render(name, spec, self.rng)
        self.fns.append(fn)
        self.node_fn[new_ref] = (name, 0)
        self.node_layout[new_ref] = plain
        self.shapes[new_ref] = tuple(layout.logical_dims)
        return new_ref

    def _emit_group(self, group: list[RefNode]):
        base_node = group[0]
        op = base_node.op
        name, entry = self._next_name()
        fault = None
        if op == "softmax" and self._take_fault("split_softmax"):
            self._emit_split_softmax(base_node)
            return
        if op == "avgpool" and self._take_fault("split_avgpool"):
            self._emit_split_avgpool(base_node)
            return
        if op == "dense" and len(group) == 2 and group[1].op == "add" \
                and self._take_fault("split_dense_add"):
            self._emit_split_dense_add(group)
            return

        params: list[ParamEntry] = []
        extras: list[str] = []
        activation = None
        attrs = dict(base_node.attrs)
        out_node = group[-1]
        out_shape = self.shapes[out_node.id]

        def inp(ref):
            return self._unblock_ref(ref) if op in self._PLAIN_NATIVE else ref

        if op in ("conv2d", "dense"):
            params.append(self._input_entry(inp(base_node.inputs[0])))
            glow_c8 = bool(base_node.attrs.get("c8")) and self.opts.origin == "glow"
            w = base_node.weights["kernel"]
            wl = self._kernel_layout(w, glow_c8) if op == "conv2d" else identity_spec(w.shape)
            params.append(ParamEntry("weight", wl, data=block_weights(w, wl),
                                     fdata=w.copy(), node=base_node.id))
            for extra in group[1:]:
                if extra.op in ("relu", "clip"):
                    activation = ("relu",) if extra.op == "relu" else (
                        "clip", extra.attrs["min"], extra.attrs["max"])
                    continue
                if "vec" in extra.weights:
                    kind = "add" if extra.op == "add" else "mul"
                    vec = extra.weights["vec"]
                    params.append(ParamEntry("weight", identity_spec(vec.shape),
                                             data=vec.copy(), fdata=vec.copy(),
                                             node=extra.id))
                    extras.append(kind)
                else:  # residual add
                    other = next(i for i in extra.inputs
                                 if i not in {g.id for g in group})
                    pe = self._input_entry(other)
                    pe.role = "jumpadd"
                    params.append(pe)
                    extras.append("jumpadd")
        elif op == "concat":
            # param slot i holds logical input perm[i]; concat of params in
            # attrs["order"] reproduces the logical concatenation
            perm = [int(x) for x in self.rng.permutation(len(base_node.inputs))]
            inv = [0] * len(perm)
            for slot, logical in enumerate(perm):
                inv[logical] = slot
            for slot in range(len(perm)):
                params.append(self._input_entry(base_node.inputs[perm[slot]]))
            attrs["order"] = inv
            for extra in group[1:]:
                if extra.op == "shuffle":
                    attrs["shuffle_groups"] = extra.attrs["shuffle_groups"]
                elif extra.op in ("relu", "clip"):
                    activation = ("relu",) if extra.op == "relu" else (
                        "clip", extra.attrs["min"], extra.attrs["max"])
        else:
            for ref in base_node.inputs:
                params.append(self._input_entry(inp(ref)))
            for gnode in group[1:]:
                if gnode.op in ("relu", "clip"):
                    activation = ("relu",) if gnode.op == "relu" else (
                        "clip", gnode.attrs["min"], gnode.attrs["max"])
            if "vec" in base_node.weights:
                vec = base_node.weights["vec"]
                params.append(ParamEntry("weight", identity_spec(vec.shape),
                                         data=vec.copy(), fdata=vec.copy(),
                                         node=base_node.id))

        # outputs
        split_node = next((g for g in group if g.op == "split"), None)
        if op == "split" or split_node is not None:
            src = split_node or base_node
            if op == "split":
                in_shape = self.shapes[src.inputs[0]]
            else:  # fused concat..split: sections cut the group's full output
                in_shape = self.shapes[group[group.index(src) - 1].id]
            sections = src.attrs["sections"]
            for k, sec in enumerate(sections):
                shape = (in_shape[0], sec) + tuple(in_shape[2:])
                layout = self._act_layout_for_shape(shape)
                params.append(ParamEntry("output", layout, node=f"{src.id}#{k}"))
            attrs["sections"] = list(sections)
        else:
            layout = self._act_layout(out_node, out_shape)
            params.append(ParamEntry("output", layout, node=out_node.id))

        fused = self._fused_string(op, group, extras, activation)
        base = fused.base

        # fault modes that only distort the rendered code
        if activation and self._take_fault("hide_activation"):
            fault = "hide_activation"
        elif activation and activation[0] == "clip" and self._take_fault("relu_tail"):
            fault = "relu_tail"
        elif op == "avgpool" and self._take_fault("sum_lookalike"):
            fault = "sum_lookalike"

        fn = FnSpec(
            name=name, entry=entry, group=group, base=base, fused=fused,
            params=params, attrs=attrs, extras=tuple(extras), fault=fault,
        )
        if op in ("conv2d", "dense") and self.opts.quantize is not None:
            self._quantize_layer(fn)
        fn.pseudocode = self._render(fn, activation)
        self.fns.append(fn)
        outs = [p for p in fn.params if p.role == "output"]
        for slot, p in enumerate(outs):
            self.node_fn[p.node] = (name, slot)
            self.node_layout[p.node] = p.layout

    def _act_layout_for_shape(self, shape) -> LayoutSpec:
        c = self.opts.nchwc_block
        if (self.opts.origin == "tvm" and self.opts.opt_level == "O3" and c > 1
                and len(shape) == 4 and shape[1] % c == 0):
            return nchwc_spec(*shape, block=c)
        return identity_spec(shape)

    def _fused_string(self, op, group, extras, activation) -> FusedType:
        if self.opts.origin == "glow":
            if op == "conv2d":
                base = "convdkkc8" if group[0].attrs.get("c8") else "conv2d"
                if activation:
                    base = f"conv2d_{activation[0]}"
                return FusedType(base)
            if op == "dense":
                return FusedType("dense")
            if op == "flatten":
                return FusedType("tensor_transformation")
            return FusedType(op)
        if op in ("conv2d", "dense"):
            return FusedType(op, suffix=tuple(extras), activation=activation)
        if op == "concat":
            suffix = []
            if any(g.op == "shuffle" for g in group):
                suffix += ["reshape", "transpose", "reshape"]
            if any(g.op == "split" for g in group):
                suffix.append("split")
            return FusedType("concat", suffix=tuple(suffix), activation=activation)
        if op == "add":
            return FusedType("add", activation=activation)
        return FusedType(op)

    def _render(self, fn: FnSpec, activation) -> str:
        base_node = fn.group[0]
        op = base_node.op
        in_shape = self.shapes[base_node.inputs[0]] if base_node.inputs else ()
        out_node = fn.group[-1]
        out_shape = self.shapes[out_node.id]
        quant = None
        if fn.quant_scale is not None:
            quant = (fn.attrs["_quant_hex"], SHIFT_EXP)
        render_base = op
        if self.opts.origin == "glow" and op == "flatten":
            render_base = "tensor_transformation"
        if op == "shuffle":
            raise CompileError("shuffle reached the renderer ungrouped")
        n_inputs = len([p for p in fn.params if p.role == "input"])
        extra_dims = ()
        if op in templates.ELEMENTWISE_BINARY:
            weight_entry = next((p for p in fn.params if p.role == "weight"), None)
            if weight_entry is not None:
                extra_dims = tuple(weight_entry.data.shape)
            elif len(base_node.inputs) == 2:
                extra_dims = tuple(self.shapes[base_node.inputs[1]])
        spec = templates.RenderSpec(
            base=render_base,
            params=len(fn.params),
            in_dims=tuple(in_shape),
            out_dims=tuple(out_shape),
            attrs={**base_node.attrs,
                   **({"input_dims": [self.shapes[i] for i in base_node.inputs]}
                      if op == "concat" else {})},
            extras=fn.extras,
            activation=activation,
            origin=self.opts.origin,
            quant=quant,
            glow_c8=bool(base_node.attrs.get("c8")),
            fault=fn.fault,
            n_inputs=n_inputs,
            extra_dims=extra_dims,
            sections=tuple(
                prod((in_shape[0], s) + tuple(in_shape[2:]))
                for s in base_node.attrs.get("sections", [])
            ),
        )
        return templates.render(fn.name, spec, self.rng)

    # --- split-operator fault emission ---

    def _two_stage(self, node: RefNode, first_base, first_render, second_base,
                   second_render, first_attrs=None, bias_node=None):
        in_entry = self._input_entry(node.inputs[0])
        out_shape = self.shapes[node.id]
        out_layout = self._act_layout_for_shape(out_shape)

        name1, entry1 = self._next_name()
        params1 = [in_entry]
        if bias_node is not None:
            pass
        if first_base == "dense":
            w = node.weights["kernel"]
            params1.append(ParamEntry("weight", identity_spec(w.shape),
                                      data=w.copy(), fdata=w.copy(), node=node.id))
        params1.append(ParamEntry("output", out_layout, node=node.id + "/stage1"))
        in_shape = self.shapes[node.inputs[0]]
        spec1 = templates.RenderSpec(
            base=first_render, params=len(params1), in_dims=tuple(in_shape),
            out_dims=tuple(out_shape), attrs=dict(first_attrs or {}),
            origin=self.opts.origin,
        )
        fn1 = FnSpec(name=name1, entry=entry1, group=[node], base=first_base,
                     fused=FusedType(first_base), params=params1,
                     attrs=dict(first_attrs or {}), stage_op="stage1")
        fn1.pseudocode = templates.render(name1, spec1, self.rng)
        self.fns.append(fn1)
        self.node_fn[node.id + "/stage1"] = (name1, 0)
        self.node_layout[node.id + "/stage1"] = out_layout

        name2, entry2 = self._next_name()
        params2 = [ParamEntry("input", out_layout, src=name1, src_slot=0)]
        if bias_node is not None:
            vec = bias_node.weights["vec"]
            params2.append(ParamEntry("weight", identity_spec(vec.shape),
                                      data=vec.copy(), fdata=vec.copy(),
                                      node=bias_node.id))
        params2.append(ParamEntry("output", out_layout, node=(bias_node or node).id))
        spec2 = templates.RenderSpec(
            base=second_render, params=len(params2), in_dims=tuple(out_shape),
            out_dims=tuple(out_shape), attrs=dict(first_attrs or {}),
            origin=self.opts.origin,
        )
        fn2 = FnSpec(name=name2, entry=entry2, group=[node], base=second_base,
                     fused=FusedType(second_base), params=params2,
                     attrs={}, stage_op="stage2_inplace")
        fn2.pseudocode = templates.render(name2, spec2, self.rng)
        self.fns.append(fn2)
        final_node = (bias_node or node).id
        self.node_fn[final_node] = (name2, 0)
        self.node_layout[final_node] = out_layout
        return fn1, fn2

    def _emit_split_softmax(self, node: RefNode):
        self._two_stage(node, "exp", "exp", "_softmax_norm", "_softmax_norm")

    def _emit_split_avgpool(self, node: RefNode):
        self._two_stage(
            node, "sum", "_window_sum", "_pool_scale", "_pool_scale",
            first_attrs=dict(node.attrs),
        )

    def _emit_split_dense_add(self, group: list[RefNode]):
        dense_node, add_node = group[0], group[1]
        self._two_stage(dense_node, "dense", "dense", "add", "add",
                        bias_node=add_node)
        # remaining group members (activation) are not supported in this fault
        if len(group) > 2:
            raise CompileError("split_dense_add fault cannot carry an activation")


def lower(model: RefModel, opts: CompileOptions) -> Plan:
    return _Lowerer(model, opts).lower()


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _dequant_overrides(plan: Plan) -> dict:
    """Per-node dequantized weights (what the executable actually computes with)."""
    overrides: dict[str, dict[str, np.ndarray]] = {}
    from .layouts import reorder_weights

    for fn in plan.fns:
        if fn.quant_scale is None:
            continue
        s = np.float32(fn.quant_scale)
        for p in fn.params:
            if p.role != "weight" or p.node is None:
                continue
            logical = reorder_weights(p.data, p.layout).astype(np.float32) * s
            name = "kernel" if logical.ndim >= 2 else "vec"
            overrides.setdefault(p.node, {})[name] = logical
    return overrides


def _exec_primitive(node: RefNode, ins, w):
    op = node.op
    a = node.attrs
    if op == "conv2d":
        return ops.conv2d(ins[0], w["kernel"], a["stride"], a["padding"])
    if op == "dense":
        return ops.dense(ins[0], w["kernel"])
    if op == "add":
        return ops.add(ins[0], w["vec"]) if "vec" in w else ops.add(ins[0], ins[1])
    if op == "mul":
        return ops.mul(ins[0], w["vec"]) if "vec" in w else ops.mul(ins[0], ins[1])
    if op == "sub":
        return ops.sub(ins[0], ins[1])
    if op == "div":
        return ops.div(ins[0], ins[1])
    if op == "power":
        return ops.power(ins[0], ins[1])
    if op == "relu":
        return ops.relu(ins[0])
    if op == "clip":
        return ops.clip(ins[0], a["min"], a["max"])
    if op == "sqrt":
        return ops.sqrt(ins[0])
    if op == "rsqrt":
        return ops.rsqrt(ins[0])
    if op == "exp":
        return ops.exp(ins[0])
    if op == "neg":
        return ops.neg(ins[0])
    if op == "abs":
        return ops.abs_(ins[0])
    if op == "softmax":
        return ops.softmax(ins[0])
    if op == "lrn":
        return ops.lrn(ins[0], a["size"], a["alpha"], a["beta"], a["bias"])
    if op == "maxpool":
        return ops.maxpool(ins[0], a["kernel"], a["stride"], a["padding"])
    if op == "avgpool":
        return ops.avgpool(ins[0], a["kernel"], a["stride"], a["padding"])
    if op == "sum":
        return ops.reduce_sum(ins[0])
    if op == "max":
        return ops.reduce_max(ins[0])
    if op == "pad":
        return ops.pad(ins[0], a["pad_h"], a["pad_w"])
    if op == "flatten":
        return ops.flatten(ins[0])
    if op == "reshape":
        return ops.reshape(ins[0], a["shape"])
    if op == "transpose":
        return ops.transpose(ins[0], a["perm"])
    if op == "expand_dim":
        return ops.expand_dim(ins[0], a["axis"])
    if op == "concat":
        return ops.concat(ins)
    if op == "shuffle":
        return ops.channel_shuffle(ins[0], a["shuffle_groups"])
    if op == "split":
        return ops.split(ins[0], a["sections"])
    raise CompileError(f"unsupported operator {op!r}")


def execute_model(model: RefModel, plan: Plan, x: np.ndarray) -> dict:
    """Value per model node (and per split section / fault stage)."""
    overrides = _dequant_overrides(plan)
    values: dict[str, np.ndarray] = {"@input": np.asarray(x, dtype=np.float32)}
    for node in model.nodes:
        ins = [values[r] for r in node.inputs]
        w = {**node.weights, **overrides.get(node.id, {})}
        out = _exec_primitive(node, ins, w)
        if node.op == "split":
            for k, part in enumerate(out):
                values[f"{node.id}#{k}"] = part
            values[node.id] = out[0]
        elif node.op == "shuffle":
            # O0 lowers a shuffle into reshape/transpose/reshape functions;
            # register the stage values those functions dump
            x = ins[0]
            n, c, h, w_ = x.shape
            g = node.attrs["shuffle_groups"]
            r1 = x.reshape(n, g, c // g, h, w_)
            t = np.ascontiguousarray(r1.transpose(0, 2, 1, 3, 4))
            values[f"{node.id}_r1"] = r1
            values[f"{node.id}_t"] = t
            values[f"{node.id}_r2"] = out
            values[node.id] = out
        else:
            values[node.id] = out
    for fn in plan.fns:
        if fn.stage_op is not None and fn.stage_op.startswith("alias:"):
            src = fn.stage_op[len("alias:"):]
            values[src + "/unblocked"] = values[src]
        if fn.stage_op == "stage1":
            node = fn.group[0]
            src = values[node.inputs[0]]
            if fn.base == "exp":
                values[node.id + "/stage1"] = ops.softmax_exp_stage(src)
            elif fn.base == "sum":
                a = node.attrs
                values[node.id + "/stage1"] = ops.pool_window_sum(
                    src, a["kernel"], a["stride"], a["padding"])
            elif fn.base == "dense":
                values[node.id + "/stage1"] = values[node.id]
    return values


def reference_outputs(model: RefModel, opts: CompileOptions, inputs) -> list:
    """Final-node outputs of the (possibly quantized) compiled model."""
    plan = lower(model, opts)
    outs = []
    for x in inputs:
        values = execute_model(model, plan, x)
        outs.append(values[model.nodes[-1].id])
    return outs


# ---------------------------------------------------------------------------
# tracing
# ---------------------------------------------------------------------------

class _Arena:
    def __init__(self, base: int, reuse: bool):
        self.next = base
        self.reuse = reuse
        self.free: dict[int, list[int]] = {}

    def alloc(self, size: int) -> int:
        size = (size + 63) // 64 * 64
        if self.reuse and self.free.get(size):
            return self.free[size].pop()
        addr = self.next
        self.next += size
        return addr

    def release(self, addr: int, size: int):
        if self.reuse:
            size = (size + 63) // 64 * 64
            self.free.setdefault(size, []).append(addr)


_DTYPE_SIZE = {"f32": 4, "i8": 1, "u8": 1, "i32": 4}


def _stored_bytes(value: np.ndarray, layout: LayoutSpec) -> bytes:
    stored = block_weights(np.asarray(value, dtype=np.float32), layout)
    return stored.astype("<f4").tobytes()


def _dump_dims(layout: LayoutSpec, origin: str):
    if origin == "glow":
        return (int(prod(layout.stored_dims)),)
    return tuple(layout.stored_dims)


class _WindowBuilder:
    """Taint chains for fused extras: load, hops, distractors, terminal."""

    def __init__(self, rng, base_addr: int):
        self.rng = rng
        self.addr = base_addr
        self.insns: list[Instruction] = []
        self.regs = [f"r{i}" for i in range(16)]

    def _emit(self, opclass, operands, raw):
        ins = Instruction(self.addr, opclass, tuple(operands), raw)
        self.insns.append(ins)
        self.addr += 4
        return ins

    def chain(self, param_addr: int, kind: str) -> int:
        """Emit one chain; returns the first-read instruction address."""
        rng = self.rng
        pool = list(self.regs)
        rng.shuffle(pool)
        cur = pool.pop()
        first = self._emit(OpClass.LOAD, [cur, f"[0x{param_addr:x}]"],
                           f"ldr {cur}, [0x{param_addr:x}]")
        hops = int(rng.integers(1, 4))
        for _ in range(hops):
            choice = rng.integers(0, 3)
            if choice == 0:
                nxt = pool.pop()
                self._emit(OpClass.OTHER, [nxt, cur], f"mov {nxt}, {cur}")
                cur = nxt
            elif choice == 1:
                slot = f"[sp+0x{int(rng.integers(0x200, 0x300)) * 8:x}]"
                self._emit(OpClass.STORE, [slot, cur], f"str {cur}, {slot}")
                nxt = pool.pop()
                self._emit(OpClass.LOAD, [nxt, slot], f"ldr {nxt}, {slot}")
                cur = nxt
            else:
                a, b, d = pool.pop(), pool.pop(), pool.pop()
                arith = OpClass.ADD if rng.integers(0, 2) else OpClass.MUL
                word = "add" if arith is OpClass.ADD else "mul"
                self._emit(arith, [d, a, b], f"{word} {d}, {a}, {b}")
                pool.insert(0, a)
                pool.insert(0, b)
        other = pool.pop()
        dest = pool.pop()
        opclass = OpClass.MUL if kind == "mul" else OpClass.ADD
        word = "mul" if kind == "mul" else "add"
        self._emit(opclass, [dest, cur, other], f"{word} {dest}, {cur}, {other}")
        return first.addr


def trace_plan(plan: Plan, x: np.ndarray) -> TraceLog:
    opts = plan.opts
    rng = np.random.default_rng(opts.seed + 1)
    values = execute_model(plan.model, plan, x)
    events = []
    blobs: dict[str, bytes] = {}
    weights_next = [0x7F0000000000]
    act = _Arena(0x10000000, opts.reuse_buffers)

    # reference counts per produced buffer: (fn, slot) or "@input"
    rc: dict = {}
    for fn in plan.fns:
        for p in fn.params:
            if p.role in ("input", "jumpadd") and p.src is not None:
                key = "@input" if p.src == "@input" else (p.src, p.src_slot)
                rc[key] = rc.get(key, 0) + 1

    x = np.asarray(x, dtype=np.float32)
    entry_buf = act.alloc(x.nbytes)
    buf_addr: dict = {"@input": entry_buf}
    buf_val: dict = {"@input": x}
    buf_size: dict = {"@input": x.nbytes}

    def weight_addr(size: int) -> int:
        addr = weights_next[0]
        weights_next[0] += (size + 63) // 64 * 64
        return addr

    for seq, fn in enumerate(plan.fns, start=1):
        out_entries = [p for p in fn.params if p.role == "output"]
        inplace = fn.stage_op == "stage2_inplace"
        out_addrs = []
        for p in out_entries:
            size = int(prod(p.layout.stored_dims)) * 4
            if inplace:
                src_entry = next(q for q in fn.params if q.role == "input")
                out_addrs.append(buf_addr[(src_entry.src, src_entry.src_slot)])
            else:
                out_addrs.append(act.alloc(size))

        param_addrs = []
        out_i = 0
        weight_data: dict[int, ParamEntry] = {}
        for idx, p in enumerate(fn.params):
            if p.role in ("input", "jumpadd"):
                key = "@input" if p.src == "@input" else (p.src, p.src_slot)
                param_addrs.append(buf_addr[key])
            elif p.role == "weight":
                addr = weight_addr(p.data.nbytes)
                param_addrs.append(addr)
                weight_data[idx] = p
            else:
                param_addrs.append(out_addrs[out_i])
                out_i += 1
        events.append(CallEvent(seq, fn.name, tuple(param_addrs)))

        # entry dumps: inputs and weights
        for idx, p in enumerate(fn.params):
            ref = f"{fn.name}.param{idx}"
            if p.role in ("input", "jumpadd"):
                key = "@input" if p.src == "@input" else (p.src, p.src_slot)
                blobs[ref] = _stored_bytes(buf_val[key], p.layout)
                events.append(TensorDumpEvent(fn.name, idx,
                                              _dump_dims(p.layout, opts.origin),
                                              "f32", ref))
            elif p.role == "weight":
                blobs[ref] = np.ascontiguousarray(p.data).tobytes()
                events.append(TensorDumpEvent(fn.name, idx,
                                              _dump_dims(p.layout, opts.origin),
                                              p.dtype, ref))

        # taint windows for fused extras (tvm only)
        if opts.origin == "tvm" and fn.extras:
            wb = _WindowBuilder(rng, fn.entry + 0x100)
            for j, kind in enumerate(fn.extras):
                if kind == "jumpadd":
                    continue
                pidx = 2 + j
                start = wb.chain(param_addrs[pidx], kind)
                events.append(FirstReadEvent(fn.name, pidx, start))
            if wb.insns:
                events.append(InsnWindowEvent(fn.name, tuple(wb.insns)))

        # outputs (next-entry dump semantics: nothing runs in between)
        out_i = 0
        for idx, p in enumerate(fn.params):
            if p.role != "output":
                continue
            val = values[p.node]
            key = (fn.name, out_i)
            buf_addr[key] = param_addrs[idx]
            buf_val[key] = val
            buf_size[key] = int(prod(p.layout.stored_dims)) * 4
            ref = f"{fn.name}.param{idx}"
            blobs[ref] = _stored_bytes(val, p.layout)
            events.append(TensorDumpEvent(fn.name, idx,
                                          _dump_dims(p.layout, opts.origin),
                                          "f32", ref))
            out_i += 1

        # release consumed buffers (after the output exists)
        for p in fn.params:
            if p.role in ("input", "jumpadd"):
                key = "@input" if p.src == "@input" else (p.src, p.src_slot)
                rc[key] -= 1
                if rc[key] == 0 and key != "@input" and not inplace:
                    act.release(buf_addr[key], buf_size[key])

    return TraceLog(events, blobs)


def trace_model(model: RefModel, opts: CompileOptions, x: np.ndarray) -> TraceLog:
    return trace_plan(lower(model, opts), x)


# ---------------------------------------------------------------------------
# bundle + manifest emission
# ---------------------------------------------------------------------------

def _bundle_for(fn: FnSpec, origin: str) -> FunctionBundle:
    insns = [
        Instruction(fn.entry, OpClass.OTHER, ("sp", "sp", "0x40"),
                    "sub sp, sp, 0x40"),
        Instruction(fn.entry + 4, OpClass.OTHER, ("fp", "sp"), "mov fp, sp"),
    ]
    records = []
    if origin == "tvm":
        records = [
            ParamRecord(i, tuple(p.layout.stored_dims), p.dtype)
            for i, p in enumerate(fn.params)
        ]
        desc, _ = descriptor_instructions(records, fn.entry + 0x10)
        insns += desc
    return FunctionBundle(
        name=fn.name,
        entry_addr=fn.entry,
        disassembly=tuple(insns),
        pseudocode=fn.pseudocode,
        origin=origin,
        param_records=tuple(records),
    )


def compile_model(model: RefModel, opts: CompileOptions):
    """Lower a model; returns (bundles, manifest)."""
    plan = lower(model, opts)
    bundles = [_bundle_for(fn, opts.origin) for fn in plan.fns]
    return bundles, build_manifest(plan)


@dataclass
class Manifest:
    origin: str
    opt_level: str
    seed: int
    input_shape: tuple
    nodes: list            # logical node dicts (post split-merge view)
    weights: dict          # key -> float32 standard-layout array
    quant: dict | None
    faults: list

    def node(self, fn: str) -> dict:
        for n in self.nodes:
            if n["fn"] == fn:
                return n
        raise KeyError(fn)

    def to_json(self):
        return {
            "origin": self.origin,
            "opt_level": self.opt_level,
            "seed": self.seed,
            "input_shape": list(self.input_shape),
            "nodes": self.nodes,
            "quant": self.quant,
            "faults": self.faults,
        }


def _manifest_inputs(fn: FnSpec):
    refs = []
    for p in fn.params:
        if p.role in ("input", "jumpadd"):
            refs.append("@input" if p.src == "@input" else [p.src, p.src_slot])
    return refs


def build_manifest(plan: Plan) -> Manifest:
    nodes = []
    weights: dict[str, np.ndarray] = {}
    faults = []
    fns = list(plan.fns)
    i = 0
    while i < len(fns):
        fn = fns[i]
        if fn.stage_op == "stage1":
            nxt = fns[i + 1]
            if fn.base == "exp":
                fused = "softmax"
                attrs = {}
                kind = "split_softmax"
            elif fn.base == "sum":
                fused = "avgpool"
                attrs = {k: fn.attrs[k] for k in ("kernel", "stride", "padding")}
                kind = "split_avgpool"
            else:
                fused = "dense·add"
                attrs = {}
                kind = "split_dense_add"
            node = {
                "fn": fn.name,
                "fused": fused,
                "attrs": attrs,
                "inputs": _manifest_inputs(fn),
                "weights": {},
                "n_outputs": 1,
                "absorbed": [nxt.name],
            }
            if fn.base == "dense":
                node["weights"]["p1"] = f"{fn.name}.p1"
                weights[f"{fn.name}.p1"] = fn.params[1].fdata
                bias = next(p for p in nxt.params if p.role == "weight")
                node["weights"]["p2"] = f"{fn.name}.p2"
                weights[f"{fn.name}.p2"] = bias.fdata
            faults.append({"kind": kind, "fn": fn.name, "absorbed": nxt.name})
            nodes.append(node)
            i += 2
            continue
        attrs = {k: v for k, v in fn.attrs.items() if not k.startswith("_")}
        node = {
            "fn": fn.name,
            "fused": fn.fused.as_string(),
            "attrs": attrs,
            "inputs": _manifest_inputs(fn),
            "weights": {},
            "n_outputs": len([p for p in fn.params if p.role == "output"]),
        }
        for idx, p in enumerate(fn.params):
            if p.role == "weight":
                key = f"{fn.name}.p{idx}"
                node["weights"][f"p{idx}"] = key
                weights[key] = p.fdata
        if fn.fault:
            faults.append({"kind": fn.fault, "fn": fn.name})
        nodes.append(node)
        i += 1
    quant = None
    if plan.opts.quantize is not None:
        quant = {"mode": plan.opts.quantize.mode, "layers": plan.quant}
    return Manifest(
        origin=plan.opts.origin,
        opt_level=plan.opts.opt_level,
        seed=plan.opts.seed,
        input_shape=tuple(plan.model.input_shape),
        nodes=nodes,
        weights=weights,
        quant=quant,
        faults=faults,
    )


def save_manifest(manifest: Manifest, path):
    path = Path(path)
    index = {}
    offset = 0
    bin_path = path.parent / (path.stem + "_weights.bin")
    with open(bin_path, "wb") as fh:
        for key in sorted(manifest.weights):
            arr = np.ascontiguousarray(manifest.weights[key], dtype=np.float32)
            fh.write(arr.tobytes())
            index[key] = {"offset": offset, "shape": list(arr.shape)}
            offset += arr.nbytes
    doc = manifest.to_json()
    doc["weights_file"] = bin_path.name
    doc["weight_index"] = index
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    weights = {}
    if doc.get("weight_index"):
        blob = np.fromfile(path.parent / doc["weights_file"], dtype="<f4")
        for key, meta in doc["weight_index"].items():
            start = meta["offset"] // 4
            count = int(prod(meta["shape"])) if meta["shape"] else 1
            weights[key] = blob[start : start + count].reshape(meta["shape"]).copy()
    return Manifest(
        origin=doc["origin"],
        opt_level=doc["opt_level"],
        seed=doc["seed"],
        input_shape=tuple(doc["input_shape"]),
        nodes=doc["nodes"],
        weights=weights,
        quant=doc.get("quant"),
        faults=doc.get("faults", []),
    )


def plan_outputs(plan: Plan, inputs) -> list:
    """Final-node outputs for each input, under the plan's weight treatment."""
    return [execute_model(plan.model, plan, x)[plan.model.nodes[-1].id]
            for x in inputs]


def write_verify_data(plan: Plan, outdir, count: int = 100, seed_offset: int = 11):
    """Random inputs plus reference outputs for the verification stage."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(plan.opts.seed + seed_offset)
    shape = tuple(plan.model.input_shape)
    xs = [rng.standard_normal(shape).astype(np.float32) for _ in range(count)]
    ys = plan_outputs(plan, xs)
    np.stack(xs).astype("<f4").tofile(outdir / "inputs.bin")
    np.stack(ys).astype("<f4").tofile(outdir / "outputs.bin")
    with open(outdir / "meta.json", "w", encoding="utf-8") as fh:
        json.dump({"count": count, "input_shape": list(shape),
                   "output_shape": list(np.asarray(ys[0]).shape)}, fh, sort_keys=True)
        fh.write("\n")
    return outdir


def write_query_data(plan: Plan, outdir, count: int = 500, seed_offset: int = 13):
    """Query dataset (inputs + argmax labels from the target) for kl recovery."""
    from .quant import QueryDataset, save_query_dataset

    rng = np.random.default_rng(plan.opts.seed + seed_offset)
    shape = tuple(plan.model.input_shape)
    xs = [rng.standard_normal(shape).astype(np.float32) for _ in range(count)]
    labels = [int(np.argmax(np.asarray(y).reshape(-1)))
              for y in plan_outputs(plan, xs)]
    ds = QueryDataset(inputs=xs, labels=labels)
    save_query_dataset(ds, outdir)
    return outdir


def simulate(model: RefModel, opts: CompileOptions, outdir, input_tensor=None,
             verify_inputs: int = 100, query_count: int = 0):
    """Write bundle.json, trace.jsonl (+blobs), manifest.json and the
    verification dataset to outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    plan = lower(model, opts)
    bundles = [_bundle_for(fn, opts.origin) for fn in plan.fns]
    save_bundle_file(outdir / "bundle.json", bundles, origin=opts.origin)
    if input_tensor is None:
        rng = np.random.default_rng(opts.seed + 7)
        input_tensor = rng.standard_normal(model.input_shape).astype(np.float32)
    log = trace_plan(plan, input_tensor)
    save_trace(outdir / "trace.jsonl", log)
    np.ascontiguousarray(input_tensor, dtype="<f4").tofile(outdir / "input.bin")
    manifest = build_manifest(plan)
    save_manifest(manifest, outdir / "manifest.json")
    artifacts = {
        "bundle": outdir / "bundle.json",
        "trace": outdir / "trace.jsonl",
        "manifest": outdir / "manifest.json",
        "input": outdir / "input.bin",
    }
    if verify_inputs:
        artifacts["verify"] = write_verify_data(plan, outdir / "verify", verify_inputs)
    if query_count and opts.quantize is not None:
        artifacts["queries"] = write_query_data(plan, outdir / "queries", query_count)
    return artifacts
