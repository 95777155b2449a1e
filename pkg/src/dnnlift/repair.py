"""Error-fix strategies driven by per-operator output comparison.

Wrong activations are repaired by replaying the recovered model layer by
layer against the traced dumps and swapping the activation at the first
mismatching operator until its output matches.  Anything the activation
alternatives cannot explain escalates to a diagnostic naming the suspect
operator; manual corrections come back in through a patch file so repairs
stay reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .classify import FusedType
from .emit import emit_ir
from .errors import EmissionError, ExecutionError, LiftError, NeedsPatchError
from .graph import ComputationGraph, assign_roles, record_tensor
from .ir import forward_trace
from .layouts import reorder_weights

ACTIVATION_ALTERNATIVES = (None, ("relu",), ("clip", 0.0, 6.0))
MATCH_TOL = 1e-5


@dataclass
class DiagnosticReport:
    fn: str
    message: str
    candidates: list = field(default_factory=list)
    dims: dict = field(default_factory=dict)
    pseudocode: str = ""

    def to_json(self):
        return {
            "fn": self.fn,
            "message": self.message,
            "candidates": list(self.candidates),
            "dims": self.dims,
            "pseudocode": self.pseudocode,
        }

    def to_text(self) -> str:
        lines = [
            f"suspect operator: {self.fn}",
            f"  {self.message}",
        ]
        if self.candidates:
            lines.append(f"  candidates: {', '.join(self.candidates)}")
        for k, v in self.dims.items():
            lines.append(f"  {k}: {v}")
        if self.pseudocode:
            lines.append("  pseudocode:")
            lines += ["    " + ln for ln in self.pseudocode.splitlines()[:20]]
        return "\n".join(lines)


def save_diagnostic(report: DiagnosticReport, json_path, text_path=None):
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    if text_path:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_text() + "\n")


def traced_input(graph: ComputationGraph, log) -> np.ndarray:
    if graph.entry is None:
        raise LiftError("graph has no entry input")
    fn, idx = graph.entry
    rec = graph.node(fn)
    spec = rec.param_layouts[idx]
    raw = record_tensor(log, rec, idx)
    return reorder_weights(raw, spec) if spec is not None else raw


def dumped_output(graph: ComputationGraph, log, fn: str, slot: int = 0) -> np.ndarray:
    rec = graph.node(fn)
    out_idx = len(rec.param_addrs) - rec.n_outputs + slot
    spec = rec.param_layouts[out_idx]
    raw = record_tensor(log, rec, out_idx)
    if spec is None:
        return raw
    return reorder_weights(raw, spec)


def _values_match(a: np.ndarray, b: np.ndarray, tol: float = MATCH_TOL) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape and a.size != b.size:
        return False
    a, b = a.reshape(-1), b.reshape(-1)
    return bool(np.all(np.abs(a - b) <= tol))


def _node_outputs(ir, values, fn: str):
    """Recovered-model outputs for a graph node, one array per output slot."""
    ref = None
    for node in reversed(ir.nodes):
        if node.id.startswith(fn + "."):
            ref = node.id
            break
    if ref is None:
        raise LiftError(f"no IR nodes for {fn}")
    val = values[ref]
    return val if isinstance(val, list) else [val]


def verify_against_dumps(graph: ComputationGraph, log, x=None):
    """Run the recovered model and compare every node against its dump.

    Returns (ir, values, list of (fn, ok)).
    """
    ir = emit_ir(graph)
    if x is None:
        x = traced_input(graph, log)
    values = forward_trace(ir, x)
    results = []
    for rec in graph.nodes:
        ok = True
        outs = _node_outputs(ir, values, rec.fn)
        for slot in range(rec.n_outputs):
            want = dumped_output(graph, log, rec.fn, slot)
            got = outs[slot] if slot < len(outs) else None
            if got is None or not _values_match(got, want):
                ok = False
                break
        results.append((rec.fn, ok))
    return ir, values, results


def fix_activation(graph: ComputationGraph, log):
    """Repair wrong activation suffixes by dump comparison.

    Walks operators in execution order; at the first mismatch, tries the
    activation alternatives and keeps the one whose output matches the dump,
    then continues until the whole model matches.  Returns the list of
    repairs; raises NeedsPatchError with a diagnostic when no alternative
    explains the mismatch.
    """
    repairs = []
    guard = 0
    while True:
        guard += 1
        if guard > len(graph.nodes) + 2:
            raise LiftError("activation repair did not converge")
        try:
            _, _, results = verify_against_dumps(graph, log)
        except (ExecutionError, EmissionError) as e:
            raise NeedsPatchError(
                str(e), report=_diagnose_from_exception(graph, e)
            ) from e
        bad = next((fn for fn, ok in results if not ok), None)
        if bad is None:
            return repairs
        rec = graph.node(bad)
        if not _try_activation_fix(graph, log, rec):
            report = DiagnosticReport(
                fn=rec.fn,
                message="output disagrees with the traced dump and no "
                        "activation alternative explains it",
                candidates=list(rec.candidates),
                dims=_dims_context(rec),
                pseudocode=rec.pseudocode,
            )
            raise NeedsPatchError(f"{rec.fn}: unrepairable mismatch", report=report)
        repairs.append(
            f"{rec.fn}: activation set to "
            f"{rec.fused.activation[0] if rec.fused.activation else 'none'}"
        )


def _try_activation_fix(graph, log, rec) -> bool:
    if rec.base not in ("conv2d", "dense", "add", "concat"):
        return False
    original = rec.fused.activation if rec.fused else None
    want = dumped_output(graph, log, rec.fn)
    for alt in ACTIVATION_ALTERNATIVES:
        if alt == original:
            continue
        rec.fused.activation = alt
        try:
            ir, values, _ = verify_against_dumps(graph, log)
            got = _node_outputs(ir, values, rec.fn)[0]
        except (ExecutionError, EmissionError):
            continue
        if _values_match(got, want):
            return True
    rec.fused.activation = original
    return False


def _dims_context(rec) -> dict:
    ctx = {}
    for i, spec in enumerate(rec.param_layouts):
        if spec is not None:
            ctx[f"param{i}"] = list(spec.logical_dims)
    return ctx


def _diagnose_from_exception(graph, exc) -> DiagnosticReport:
    fn = getattr(exc, "node", None)
    if fn is not None and "." in str(fn):
        fn = str(fn).split(".")[0]
    rec = None
    if fn:
        try:
            rec = graph.node(fn)
        except KeyError:
            rec = None
    if rec is None:
        rec = graph.nodes[-1]
    return DiagnosticReport(
        fn=rec.fn,
        message=str(exc),
        candidates=list(rec.candidates),
        dims=_dims_context(rec),
        pseudocode=rec.pseudocode,
    )


def diagnose_failure(graph: ComputationGraph, context) -> DiagnosticReport:
    """Build the manual-triage report for an unrepairable operator."""
    if isinstance(context, Exception):
        return _diagnose_from_exception(graph, context)
    rec = graph.node(context) if isinstance(context, str) else context
    return DiagnosticReport(
        fn=rec.fn,
        message=rec.error or "operator flagged for manual correction",
        candidates=list(rec.candidates),
        dims=_dims_context(rec),
        pseudocode=rec.pseudocode,
    )


# ---------------------------------------------------------------------------
# patch files
# ---------------------------------------------------------------------------

def load_patch(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def apply_patch(records, patch: dict):
    """Override operator types/attributes from a patch file, in place."""
    applied = []
    by_fn = {r.fn: r for r in records}
    for fn, fix in patch.items():
        rec = by_fn.get(fn)
        if rec is None:
            raise LiftError(f"patch names unknown function {fn}")
        if "type" in fix:
            rec.fused = FusedType.parse(fix["type"])
            rec.base = rec.fused.base
            rec.error = None
            rec.candidates = tuple(set(rec.candidates) | {rec.base})
            assign_roles(rec)
        if "attrs" in fix:
            rec.attrs.update(fix["attrs"])
        applied.append(fn)
    return applied
