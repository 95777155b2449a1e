"""Quantized-weight recovery.

Integer-domain weights are rescaled by the fixed-point shift-multiplication
constant the executable embeds (``value = HEX / 2**SHIFT``).  Under a single
global scale the rescaled weights land next to the originals; per-layer
calibrated scales get entangled with other multiplications, leaving each
weight tensor off by an unknown positive multiple.  Those multiples are the
only free parameters: substitute training freezes the rescaled weights,
parameterizes one multiple per weight tensor as ``m = exp(theta)``, and fits
cross-entropy against labels queried from the target.

The backward pass is hand-rolled for the op set quantized CNNs use; the
analytic gradients are checked against central finite differences in tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops, templates
from .errors import QuantParseError, TrainingError
from .ir import ModelIR

F32 = np.float32


def parse_shift_mult(pseudocode: str) -> float:
    """Decode the first ``(0xHEX >> 0xSHIFT)`` constant as HEX / 2**SHIFT."""
    m = templates.SHIFT_MULT_RE.search(pseudocode)
    if not m:
        raise QuantParseError(
            "no shift-multiplication constant in pseudocode (non-quantized op?)"
        )
    value = int(m.group(1), 16)
    shift = int(m.group(2), 16)
    return value / float(1 << shift)


def rescale_weights(dumped: np.ndarray, shifted_multiplication: float) -> np.ndarray:
    """Elementwise integer -> float rescale; exact, no accumulation."""
    dumped = np.asarray(dumped)
    if dumped.dtype.kind not in ("i", "u"):
        raise QuantParseError(f"rescale expects integer weights, got {dumped.dtype}")
    return dumped.astype(F32) * F32(shifted_multiplication)


@dataclass
class QueryDataset:
    inputs: list
    labels: list

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise TrainingError("query dataset inputs/labels length mismatch")


def save_query_dataset(ds: QueryDataset, outdir):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "label"])
        for i, lab in enumerate(ds.labels):
            writer.writerow([i, int(lab)])
    shape = np.asarray(ds.inputs[0]).shape if ds.inputs else ()
    with open(outdir / "meta.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["count", *[f"d{i}" for i in range(len(shape))]])
        writer.writerow([len(ds.inputs), *shape])
    stacked = np.stack([np.asarray(x, dtype=F32) for x in ds.inputs]) if ds.inputs \
        else np.zeros((0,), dtype=F32)
    stacked.astype("<f4").tofile(outdir / "inputs.bin")


def load_query_dataset(path) -> QueryDataset:
    path = Path(path)
    with open(path / "meta.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    count = int(rows[1][0])
    shape = tuple(int(v) for v in rows[1][1:])
    data = np.fromfile(path / "inputs.bin", dtype="<f4").reshape((count, *shape))
    labels = []
    with open(path / "labels.csv", newline="", encoding="utf-8") as fh:
        for row in list(csv.reader(fh))[1:]:
            labels.append(int(row[1]))
    return QueryDataset(inputs=[data[i] for i in range(count)], labels=labels)


# ---------------------------------------------------------------------------
# scaled forward / backward
# ---------------------------------------------------------------------------

_SUPPORTED = ("conv2d", "dense", "add", "mul", "relu", "clip", "maxpool",
              "avgpool", "flatten", "reshape", "softmax")


@dataclass
class _Tape:
    node: object
    inputs: list
    output: np.ndarray
    aux: dict = field(default_factory=dict)


def _scaled_weight(ir: ModelIR, node, multiples) -> np.ndarray | None:
    if node.weight is None:
        return None
    w = ir.weights[node.weight]
    m = multiples.get(node.weight, 1.0)
    return w * F32(m)


def _forward_tape(ir: ModelIR, x: np.ndarray, multiples) -> tuple[list[_Tape], np.ndarray]:
    values: dict = {}

    def resolve(ref):
        if ref == "@input":
            return x
        if isinstance(ref, (list, tuple)):
            return values[ref[0]][ref[1]]
        return values[ref]

    tape: list[_Tape] = []
    for node in ir.nodes:
        if node.op not in _SUPPORTED:
            raise TrainingError(
                f"op {node.op!r} has no backward rule (node {node.id})"
            )
        ins = [resolve(r) for r in node.inputs]
        w = _scaled_weight(ir, node, multiples)
        aux = {}
        a = node.attrs
        if node.op == "conv2d":
            out = ops.conv2d(ins[0], w, a["stride"], a["padding"])
        elif node.op == "dense":
            out = ops.dense(ins[0], w)
        elif node.op == "add":
            out = ops.add(ins[0], w if w is not None else ins[1])
        elif node.op == "mul":
            out = ops.mul(ins[0], w if w is not None else ins[1])
        elif node.op == "relu":
            out = ops.relu(ins[0])
        elif node.op == "clip":
            out = ops.clip(ins[0], a["min"], a["max"])
        elif node.op == "maxpool":
            out, aux = _maxpool_fwd(ins[0], a["kernel"], a["stride"], a["padding"])
        elif node.op == "avgpool":
            out = ops.avgpool(ins[0], a["kernel"], a["stride"], a["padding"])
        elif node.op == "flatten":
            out = ops.flatten(ins[0])
        elif node.op == "reshape":
            shape = [ins[0].shape[0]] + [int(s) for s in a["shape"]][1:]
            out = ops.reshape(ins[0], shape)
        elif node.op == "softmax":
            out = ops.softmax(ins[0])
        values[node.id] = out
        tape.append(_Tape(node, ins, out, aux))
    return tape, values[ir.output_id()]


def _maxpool_fwd(x, k, s, p):
    xp, oh, ow = ops._pool_prepare(x, k, s, p, -np.inf)
    stack = np.stack([
        xp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s]
        for kh in range(k) for kw in range(k)
    ])
    idx = np.argmax(stack, axis=0)
    out = np.take_along_axis(stack, idx[None], axis=0)[0]
    return out, {"idx": idx, "padded_shape": xp.shape}


def _conv2d_grad_x(grad_y, w, x_shape, stride, padding):
    n, c, h, wd = x_shape
    o, i, k, _ = w.shape
    oh, ow = grad_y.shape[2], grad_y.shape[3]
    gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=F32)
    for kh in range(k):
        for kw in range(k):
            gxp[:, :, kh : kh + stride * oh : stride, kw : kw + stride * ow : stride] += \
                np.einsum("nohw,oi->nihw", grad_y, w[:, :, kh, kw], dtype=F32)
    if padding:
        return gxp[:, :, padding : padding + h, padding : padding + wd]
    return gxp


def _maxpool_grad(grad_y, aux, x_shape, k, s, p):
    n, c, h, w = x_shape
    idx = aux["idx"]
    gxp = np.zeros(aux["padded_shape"], dtype=F32)
    oh, ow = grad_y.shape[2], grad_y.shape[3]
    for tap in range(k * k):
        kh, kw = divmod(tap, k)
        mask = (idx == tap).astype(F32) * grad_y
        gxp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += mask
    if p:
        return gxp[:, :, p : p + h, p : p + w]
    return gxp


def _avgpool_grad(grad_y, x_shape, k, s, p):
    n, c, h, w = x_shape
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=F32)
    oh, ow = grad_y.shape[2], grad_y.shape[3]
    scaled = grad_y * ops.avgpool_scale(k)
    for kh in range(k):
        for kw in range(k):
            gxp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += scaled
    if p:
        return gxp[:, :, p : p + h, p : p + w]
    return gxp


def _backward(ir: ModelIR, tape: list[_Tape], grad_out: np.ndarray, multiples):
    """Reverse pass; returns (grads w.r.t. each weight multiple, by key)."""
    grads: dict[str, np.ndarray] = {}
    mgrads: dict[str, float] = {}
    grads[tape[-1].node.id] = grad_out

    def inref(node, i):
        ref = node.inputs[i]
        if isinstance(ref, (list, tuple)):
            return ref[0]
        return ref

    for entry in reversed(tape):
        node = entry.node
        g = grads.pop(node.id, None)
        if g is None:
            continue
        a = node.attrs
        x = entry.inputs[0]
        w = _scaled_weight(ir, node, multiples)
        if node.op == "conv2d":
            # output is linear in the multiple: d loss/dm = <g, y>/m
            m = multiples.get(node.weight, 1.0)
            mgrads[node.weight] = mgrads.get(node.weight, 0.0) + float(
                np.sum(g * entry.output) / m
            )
            gx = _conv2d_grad_x(g, w, x.shape, a["stride"], a["padding"])
        elif node.op == "dense":
            m = multiples.get(node.weight, 1.0)
            mgrads[node.weight] = mgrads.get(node.weight, 0.0) + float(
                np.sum(g * entry.output) / m
            )
            gx = g @ w
        elif node.op == "add":
            if node.weight is not None:
                # y = x + m*b, so d loss/dm = <g, broadcast(b)>
                b = ir.weights[node.weight]
                mgrads[node.weight] = mgrads.get(node.weight, 0.0) + float(
                    np.sum(g * ops._channel_operand(x, b))
                )
                gx = g
            else:
                other = inref(node, 1)
                grads[other] = grads.get(other, 0.0) + g
                gx = g
        elif node.op == "mul":
            m = multiples.get(node.weight, 1.0)
            mgrads[node.weight] = mgrads.get(node.weight, 0.0) + float(
                np.sum(g * entry.output) / m
            )
            gx = g * ops._channel_operand(x, w)
        elif node.op == "relu":
            gx = g * (entry.output > 0)
        elif node.op == "clip":
            gx = g * ((x > a["min"]) & (x < a["max"]))
        elif node.op == "maxpool":
            gx = _maxpool_grad(g, entry.aux, x.shape, a["kernel"], a["stride"], a["padding"])
        elif node.op == "avgpool":
            gx = _avgpool_grad(g, x.shape, a["kernel"], a["stride"], a["padding"])
        elif node.op in ("flatten", "reshape"):
            gx = g.reshape(x.shape)
        elif node.op == "softmax":
            raise TrainingError("softmax gradient is folded into the loss")
        src = inref(node, 0)
        if src != "@input":
            grads[src] = grads.get(src, 0.0) + gx
    return mgrads


def loss_and_multiple_grads(ir: ModelIR, x_batch, labels, multiples):
    """Cross-entropy over a batch plus analytic gradients w.r.t. multiples.

    The final IR node must be softmax; its gradient is folded into the loss
    so the backward pass starts from (p - onehot)/B at the logits.
    """
    if ir.nodes[-1].op != "softmax":
        raise TrainingError("quantized recovery expects a softmax-terminated model")
    logits_ir = ModelIR(nodes=ir.nodes[:-1], input_shape=ir.input_shape,
                        weights=ir.weights, output=ir.nodes[-2].id)
    tape, logits = _forward_tape(logits_ir, x_batch, multiples)
    flat = logits.reshape(logits.shape[0], -1)
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    probs = e / e.sum(axis=1, keepdims=True)
    bsz = flat.shape[0]
    lab = np.asarray(labels)
    eps = 1e-12
    loss = float(-np.mean(np.log(probs[np.arange(bsz), lab] + eps)))
    grad = probs.copy()
    grad[np.arange(bsz), lab] -= 1.0
    grad = (grad / bsz).astype(F32).reshape(logits.shape)
    mgrads = _backward(logits_ir, tape, grad, multiples)
    acc = float(np.mean(np.argmax(flat, axis=1) == lab))
    return loss, mgrads, acc


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch: int = 64
    seed: int = 0


def train_multiples(ir: ModelIR, dataset: QueryDataset, config: TrainConfig | None = None):
    """Fit one positive multiple per weight tensor by gradient descent.

    Parameterized as m = exp(theta) so positivity is structural.  Returns
    (multiples dict, training log rows [epoch, loss, accuracy]).
    """
    config = config or TrainConfig()
    if not dataset.inputs:
        raise TrainingError("query dataset is empty")
    keys = sorted({n.weight for n in ir.nodes if n.weight})
    theta = {k: 0.0 for k in keys}
    rng = np.random.default_rng(config.seed)
    xs = np.stack([np.asarray(v, dtype=F32) for v in dataset.inputs])
    # per-sample inputs carry the model's batch-1 leading dim; fold it away
    sample_shape = tuple(ir.input_shape[1:]) if tuple(ir.input_shape[:1]) == (1,) \
        else tuple(ir.input_shape)
    labels = np.asarray(dataset.labels)
    n = len(dataset.inputs)
    log_rows = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total_loss = 0.0
        total_acc = 0.0
        batches = 0
        for start in range(0, n, config.batch):
            sel = order[start : start + config.batch]
            batch = xs[sel].reshape((-1,) + sample_shape)
            multiples = {k: float(np.exp(t)) for k, t in theta.items()}
            loss, mgrads, acc = loss_and_multiple_grads(
                ir, batch, labels[sel], multiples
            )
            if not np.isfinite(loss):
                raise TrainingError(
                    "training diverged (loss is not finite); lower the learning rate"
                )
            for k in keys:
                # d loss/d theta = m * d loss/d m
                theta[k] -= config.lr * multiples[k] * mgrads.get(k, 0.0)
            total_loss += loss
            total_acc += acc
            batches += 1
        log_rows.append(
            [epoch, total_loss / batches, total_acc / batches]
        )
    multiples = {k: float(np.exp(t)) for k, t in theta.items()}
    return multiples, log_rows


def apply_multiples(ir: ModelIR, multiples: dict) -> ModelIR:
    weights = {
        k: (v * F32(multiples.get(k, 1.0))).astype(F32)
        for k, v in ir.weights.items()
    }
    return ModelIR(nodes=ir.nodes, input_shape=ir.input_shape,
                   weights=weights, output=ir.output)


def save_training_log(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.4f}"])
