"""Portable recovered-model IR plus the reference forward engine.

The IR is primitive-only: fused operators are expanded into chains
(conv -> add -> relu), channel shuffles into reshape/transpose/reshape, so
the executor needs standard semantics only.  Serialized form is
``model.json`` plus a little-endian float32 ``weights.bin`` sidecar indexed
from the JSON; both are deterministic byte-for-byte given the same model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import EmissionError, ExecutionError

IR_VERSION = 1

_UNARY = {
    "relu": lambda x, a: ops.relu(x),
    "softmax": lambda x, a: ops.softmax(x),
    "sqrt": lambda x, a: ops.sqrt(x),
    "rsqrt": lambda x, a: ops.rsqrt(x),
    "exp": lambda x, a: ops.exp(x),
    "neg": lambda x, a: ops.neg(x),
    "abs": lambda x, a: ops.abs_(x),
    "flatten": lambda x, a: ops.flatten(x),
}

_BINARY = {
    "add": ops.add,
    "sub": ops.sub,
    "mul": ops.mul,
    "div": ops.div,
    "power": ops.power,
}


@dataclass
class IRNode:
    id: str
    op: str
    inputs: list = field(default_factory=list)   # "@input", "<id>", or ["<id>", slot]
    weight: str | None = None
    attrs: dict = field(default_factory=dict)

    def to_json(self):
        obj = {"id": self.id, "op": self.op, "inputs": self.inputs}
        if self.weight is not None:
            obj["weight"] = self.weight
        if self.attrs:
            obj["attrs"] = self.attrs
        return obj

    @classmethod
    def from_json(cls, obj):
        return cls(
            id=obj["id"],
            op=obj["op"],
            inputs=list(obj.get("inputs", [])),
            weight=obj.get("weight"),
            attrs=dict(obj.get("attrs", {})),
        )


@dataclass
class ModelIR:
    nodes: list[IRNode]
    input_shape: tuple[int, ...]
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    output: str | None = None  # defaults to the last node

    def node(self, node_id: str) -> IRNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def output_id(self) -> str:
        return self.output or self.nodes[-1].id


def save_ir(ir: ModelIR, model_path, weights_path=None):
    model_path = Path(model_path)
    if weights_path is None:
        weights_path = model_path.parent / "weights.bin"
    index = {}
    offset = 0
    with open(weights_path, "wb") as fh:
        for key in sorted(ir.weights):
            arr = np.ascontiguousarray(ir.weights[key], dtype=np.float32)
            fh.write(arr.tobytes())
            index[key] = {"offset": offset, "shape": list(arr.shape)}
            offset += arr.nbytes
    doc = {
        "version": IR_VERSION,
        "input_shape": list(ir.input_shape),
        "output": ir.output_id() if ir.nodes else None,
        "nodes": [n.to_json() for n in ir.nodes],
        "weights_file": Path(weights_path).name,
        "weight_index": index,
    }
    with open(model_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_ir(model_path) -> ModelIR:
    model_path = Path(model_path)
    with open(model_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    weights = {}
    wpath = model_path.parent / doc.get("weights_file", "weights.bin")
    if doc.get("weight_index"):
        blob = np.fromfile(wpath, dtype="<f4")
        for key, meta in doc["weight_index"].items():
            start = meta["offset"] // 4
            count = int(np.prod(meta["shape"])) if meta["shape"] else 1
            weights[key] = blob[start : start + count].reshape(meta["shape"]).copy()
    ir = ModelIR(
        nodes=[IRNode.from_json(n) for n in doc["nodes"]],
        input_shape=tuple(doc["input_shape"]),
        weights=weights,
        output=doc.get("output"),
    )
    return ir


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _resolve(ref, values, x):
    if ref == "@input":
        return x
    if isinstance(ref, (list, tuple)):
        node_id, slot = ref
        val = values[node_id]
        return val[slot] if isinstance(val, list) else val
    val = values[ref]
    if isinstance(val, list):
        return val[0]
    return val


def run_node(node: IRNode, inputs: list, weight):
    op = node.op
    a = node.attrs
    try:
        if op in _UNARY:
            return _UNARY[op](inputs[0], a)
        if op in _BINARY:
            other = weight if weight is not None else inputs[1]
            return _BINARY[op](inputs[0], other)
        if op == "conv2d":
            return ops.conv2d(inputs[0], weight, a["stride"], a["padding"])
        if op == "dense":
            return ops.dense(inputs[0], weight)
        if op == "clip":
            return ops.clip(inputs[0], a["min"], a["max"])
        if op == "maxpool":
            return ops.maxpool(inputs[0], a["kernel"], a["stride"], a["padding"])
        if op == "avgpool":
            return ops.avgpool(inputs[0], a["kernel"], a["stride"], a["padding"])
        if op == "sum":
            return ops.reduce_sum(inputs[0], a.get("axes", (2, 3)))
        if op == "max":
            return ops.reduce_max(inputs[0], a.get("axes", (2, 3)))
        if op == "pad":
            return ops.pad(inputs[0], a.get("pad_h", 0), a.get("pad_w", 0))
        if op == "lrn":
            return ops.lrn(inputs[0], a["size"], a["alpha"], a["beta"], a["bias"])
        if op == "concat":
            return ops.concat(inputs)
        if op == "split":
            return ops.split(inputs[0], a["sections"])
        if op == "reshape":
            shape = [int(s) for s in a["shape"]]
            return ops.reshape(inputs[0], [inputs[0].shape[0]] + shape[1:])
        if op == "transpose":
            return ops.transpose(inputs[0], a["perm"])
        if op == "expand_dim":
            return ops.expand_dim(inputs[0], a["axis"])
    except ExecutionError:
        raise
    except Exception as e:
        raise ExecutionError(f"node {node.id} ({op}): {e}", node=node.id) from e
    raise ExecutionError(f"node {node.id}: unsupported op {op!r}", node=node.id)


def forward_trace(ir: ModelIR, x: np.ndarray) -> dict:
    """Run the model, returning every node's output (lists for split)."""
    x = np.asarray(x, dtype=np.float32)
    values: dict = {}
    for node in ir.nodes:
        ins = [_resolve(r, values, x) for r in node.inputs]
        weight = ir.weights.get(node.weight) if node.weight else None
        if node.weight is not None and weight is None:
            raise ExecutionError(f"node {node.id}: missing weight {node.weight}", node=node.id)
        values[node.id] = run_node(node, ins, weight)
    return values


def forward(ir: ModelIR, x: np.ndarray):
    """Run the model; returns (output, label, confidence)."""
    if tuple(x.shape) != tuple(ir.input_shape):
        raise ExecutionError(
            f"input shape {x.shape} does not match model input {ir.input_shape}"
        )
    values = forward_trace(ir, x)
    out = values[ir.output_id()]
    if isinstance(out, list):
        out = out[0]
    flat = np.asarray(out).reshape(-1)
    label = int(np.argmax(flat))
    confidence = float(flat[label])
    return out, label, confidence


# ---------------------------------------------------------------------------
# inference agreement
# ---------------------------------------------------------------------------

@dataclass
class InferenceReport:
    n: int = 0
    exact: int = 0
    top1: int = 0
    top3: int = 0
    top5: int = 0
    confidence_tol: float = 1e-5
    rows: list = field(default_factory=list)

    def rate(self, field_name: str) -> float:
        return getattr(self, field_name) / self.n if self.n else 0.0

    def to_json(self):
        return {
            "n": self.n,
            "exact": self.exact,
            "top1": self.top1,
            "top3": self.top3,
            "top5": self.top5,
            "confidence_tol": self.confidence_tol,
            "exact_rate": self.rate("exact"),
            "top1_rate": self.rate("top1"),
            "top3_rate": self.rate("top3"),
            "top5_rate": self.rate("top5"),
            "rows": self.rows,
        }


def measure_mia(ir: ModelIR, reference_outputs, inputs, tol: float = 1e-5) -> InferenceReport:
    """Compare recovered-model inference against reference outputs.

    Exact agreement means identical labels with confidence within ``tol``;
    top-k counts a hit when the reference label is inside the recovered
    model's k best (quantized recovery is judged on labels only).
    """
    report = InferenceReport(confidence_tol=tol)
    for x, ref in zip(inputs, reference_outputs):
        ref_flat = np.asarray(ref).reshape(-1)
        ref_label = int(np.argmax(ref_flat))
        ref_conf = float(ref_flat[ref_label])
        out, label, conf = forward(ir, x)
        flat = np.asarray(out).reshape(-1)
        k = min(5, flat.size)
        topk = np.argsort(flat)[::-1][:k]
        exact = label == ref_label and abs(conf - ref_conf) <= tol
        report.n += 1
        report.exact += int(exact)
        report.top1 += int(ref_label == label)
        report.top3 += int(ref_label in topk[:3])
        report.top5 += int(ref_label in topk[:5])
        report.rows.append(
            {
                "ref_label": ref_label,
                "rec_label": label,
                "ref_conf": ref_conf,
                "rec_conf": conf,
                "exact": bool(exact),
            }
        )
    return report
