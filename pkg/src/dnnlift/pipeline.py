"""End-to-end recovery pipeline with resumable stage artifacts.

Stage order: extract -> classify (coarse, fine, fused, split repair) ->
attrs -> rebuild (graph, weights, activation repair, IR) -> quant
(optional) -> verify.  Every stage persists its output in the working
directory (01_types.json, 02_attrs.json, 03_graph.json, model.json,
report.json), so any stage can be re-entered from the persisted inputs;
that is what the manual-patch repair loop relies on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import isqrt, prod
from pathlib import Path

import numpy as np

from . import attrs as attrs_mod
from .backends import make_backend
from .bundles import load_bundle_file, scan_param_records
from .classify import (
    GLOW_OPS,
    FusedType,
    attach_activation,
    coarse_classify,
    fine_classify,
    resolve_fused,
)
from .emit import emit_ir
from .errors import (
    ClassificationError,
    LiftError,
    NeedsPatchError,
    RegionError,
)
from .graph import (
    OperatorRecord,
    assign_roles,
    build_graph,
    fix_split_ops,
    record_tensor,
    recover_weights,
)
from .ir import ModelIR, load_ir, measure_mia, save_ir
from .layouts import glow_c8_spec, identity_spec, normalize_dims, reorder_weights
from .quant import (
    TrainConfig,
    apply_multiples,
    load_query_dataset,
    parse_shift_mult,
    rescale_weights,
    save_training_log,
    train_multiples,
)
from .repair import (
    DiagnosticReport,
    apply_patch,
    fix_activation,
    load_patch,
    save_diagnostic,
)
from .report import write_report, write_training_curve
from .trace import load_trace

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_STAGE = 3
EXIT_NEEDS_PATCH = 4


@dataclass
class PipelineConfig:
    bundle_path: Path
    trace_path: Path
    out_dir: Path
    backend: str = "rule"
    quant_mode: str | None = None
    patch_path: Path | None = None
    query_dir: Path | None = None
    verify_dir: Path | None = None
    confidence_tol: float = 1e-5
    max_concat_inputs: int = 8
    min_exact: float | None = None
    lr: float = 0.05
    epochs: int = 30
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        self.bundle_path = Path(self.bundle_path)
        self.trace_path = Path(self.trace_path)
        self.out_dir = Path(self.out_dir)


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        self.backend = make_backend(cfg.backend,
                                    audit_path=cfg.out_dir / "llm_audit.jsonl")
        self.bundles = None
        self.by_name = {}
        self.log = None
        self.origin = None
        self.records = None
        self.graph = None
        self.ir = None
        self.notes: dict = {}

    # --- shared loading ---

    def ensure_inputs(self):
        if self.bundles is None:
            self.bundles = load_bundle_file(self.cfg.bundle_path)
            self.by_name = {b.name: b for b in self.bundles}
            self.origin = self.bundles[0].origin if self.bundles else "tvm"
        if self.log is None:
            self.log = load_trace(self.cfg.trace_path)

    def _persist(self, name: str, doc):
        path = self.cfg.out_dir / name
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path

    def _record_pseudocode(self, obj) -> str:
        parts = [self.by_name[obj["fn"]].pseudocode]
        for absorbed in obj.get("absorbed", []):
            parts.append(self.by_name[absorbed].pseudocode)
        return "\n".join(parts)

    def load_records(self, stage_file: str):
        self.ensure_inputs()
        path = self.cfg.out_dir / stage_file
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        self.records = [
            OperatorRecord.from_json(o, pseudocode=self._record_pseudocode(o),
                                     origin=doc.get("origin", "tvm"))
            for o in doc["records"]
        ]
        return self.records

    # --- stage: extract ---

    def extract(self):
        self.ensure_inputs()
        functions = []
        for b in self.bundles:
            entry = {"name": b.name, "entry_addr": f"0x{b.entry_addr:x}",
                     "params": None}
            if b.origin == "tvm":
                records = scan_param_records(b)
                entry["params"] = [
                    {"index": r.index, "dims": list(r.dims), "dtype": r.dtype,
                     "layout": normalize_dims(r).to_json()}
                    for r in records
                ]
            functions.append(entry)
        doc = {"origin": self.origin, "functions": functions}
        self._persist("00_functions.json", doc)
        return doc

    # --- stage: classify ---

    def classify(self):
        self.ensure_inputs()
        records: list[OperatorRecord] = []
        prior_outputs: set[int] = set()
        for call in self.log.calls:
            bundle = self.by_name.get(call.fn)
            if bundle is None:
                raise LiftError(f"trace calls unknown function {call.fn}")
            rec = OperatorRecord(
                seq=call.seq, fn=call.fn, param_addrs=call.param_addrs,
                pseudocode=bundle.pseudocode, origin=self.origin,
            )
            if self.origin == "tvm":
                precs = scan_param_records(bundle)
                if len(precs) != len(call.param_addrs):
                    raise LiftError(
                        f"{call.fn}: {len(precs)} dimension records but "
                        f"{len(call.param_addrs)} traced parameters"
                    )
                rec.param_layouts = tuple(normalize_dims(r) for r in precs)
                rec.param_dtypes = tuple(r.dtype for r in precs)
                coarse = coarse_classify(list(rec.param_layouts))
                rec.taxonomy = coarse.taxonomy
                rec.candidates = coarse.candidates
            else:
                rec.param_layouts = tuple(None for _ in call.param_addrs)
                rec.param_dtypes = tuple(
                    (self.log.dump_event(call.fn, i).dtype
                     if self.log.dump_event(call.fn, i) else "f32")
                    for i in range(len(call.param_addrs))
                )
                rec.candidates = tuple(GLOW_OPS)
            try:
                rec.base = fine_classify(bundle, list(rec.candidates), self.backend)
            except ClassificationError as e:
                rec.error = str(e)
                records.append(rec)
                continue
            if rec.base in ("reshape", "transpose", "expand_dim"):
                # logical reshapes: stored dims are the real dims, any blocked
                # reading of a 5-D record would be spurious here
                rec.param_layouts = tuple(
                    identity_spec(s.stored_dims) if s is not None else None
                    for s in rec.param_layouts
                )
            if self.origin == "tvm" and rec.base in ("conv2d", "dense"):
                if len(rec.param_addrs) > 3:
                    rec.fused = resolve_fused(rec, self.log, self.backend, prior_outputs)
                else:
                    rec.fused = FusedType(
                        rec.base,
                        activation=self.backend.check_activation(rec.pseudocode),
                    )
            elif self.origin == "tvm" and rec.base in ("add", "concat"):
                rec.fused = attach_activation(rec.base, rec.pseudocode, self.backend)
            else:
                rec.fused = FusedType(rec.base)
            assign_roles(rec)
            prior_outputs.update(rec.output_addrs)
            records.append(rec)
        records, fixes, diags = fix_split_ops(records)
        self.records = records
        self.notes["split_fixes"] = fixes
        self.notes["split_diagnostics"] = diags
        doc = {
            "origin": self.origin,
            "records": [r.to_json() for r in records],
            "split_fixes": fixes,
            "split_diagnostics": diags,
        }
        self._persist("01_types.json", doc)
        return records

    # --- stage: attrs ---

    def _logical(self, fn: str, idx: int, rec: OperatorRecord) -> np.ndarray:
        raw = record_tensor(self.log, rec, idx)
        spec = rec.param_layouts[idx]
        if spec is None:
            return raw
        return reorder_weights(raw, spec)

    def _glow_height(self, region: int, channel: int) -> int:
        if channel <= 0 or region % channel:
            raise RegionError(f"region {region} not divisible by channel {channel}")
        per = region // channel
        h = isqrt(per)
        if h * h != per:
            raise RegionError(f"region {region}/{channel} is not a square height")
        return h

    def _glow_conv_attrs(self, rec: OperatorRecord):
        k = int(self.backend.extract_attr(rec.pseudocode, "conv2d", "kernel_size_loops"))
        w_numel = int(self.log.tensor(rec.fn, 1).size)
        b_numel = int(self.log.tensor(rec.fn, 2).size)
        in_c, out_c = attrs_mod.glow_conv_channels(w_numel, b_numel, k)
        in_h = self._glow_height(int(self.log.tensor(rec.fn, 0).size), in_c)
        out_h = self._glow_height(int(self.log.tensor(rec.fn, 3).size), out_c)
        stride, padding = attrs_mod.infer_sp(in_h, out_h, k)
        rec.attrs.update({"kernel": k, "stride": stride, "padding": padding})
        if rec.base == "conv2d_clip":
            bounds = self.backend.extract_attr(rec.pseudocode, "clip", "bounds")
            rec.attrs.update({"min": bounds[0], "max": bounds[1]})
        kernel_spec = (
            glow_c8_spec(out_c, in_c, k)
            if rec.base == "convdkkc8"
            else identity_spec((out_c, in_c, k, k))
        )
        rec.param_layouts = (
            identity_spec((1, in_c, in_h, in_h)),
            kernel_spec,
            identity_spec((out_c,)),
            identity_spec((1, out_c, out_h, out_h)),
        )

    def _glow_pool_attrs(self, rec: OperatorRecord):
        channel = int(self.backend.extract_attr(rec.pseudocode, rec.base, "channel_loops"))
        in_h = self._glow_height(int(self.log.tensor(rec.fn, 0).size), channel)
        out_h = self._glow_height(int(self.log.tensor(rec.fn, 1).size), channel)
        rec.param_layouts = (
            identity_spec((1, channel, in_h, in_h)),
            identity_spec((1, channel, out_h, out_h)),
        )
        inp = self._logical(rec.fn, 0, rec)
        out = self._logical(rec.fn, 1, rec)
        if rec.base == "maxpool":
            rec.attrs.update(attrs_mod.recover_maxpool(inp, out))
        else:
            rec.attrs.update(
                attrs_mod.recover_avgpool(rec.pseudocode, self.backend,
                                          in_h, out_h, dumped=(inp, out))
            )

    def _glow_generic_layouts(self, rec: OperatorRecord):
        specs = []
        n_out = rec.n_outputs
        n = len(rec.param_addrs)
        for idx in range(n):
            dump = self.log.dump_event(rec.fn, idx)
            numel = int(prod(dump.dims)) if dump else 0
            specs.append(identity_spec((1, numel)))
        rec.param_layouts = tuple(specs)
        if rec.base == "dense":
            d = rec.param_layouts[0].logical_dims[1]
            o = rec.param_layouts[n - 1].logical_dims[1]
            w_numel = int(self.log.tensor(rec.fn, 1).size)
            if w_numel != o * d:
                raise RegionError(
                    f"{rec.fn}: dense weight region {w_numel} != {o}x{d}"
                )
            specs[1] = identity_spec((o, d))
            if n == 4:
                specs[2] = identity_spec((o,))
            rec.param_layouts = tuple(specs)

    def attrs(self):
        if self.records is None:
            self.load_records("01_types.json")
        backend = self.backend
        for rec in self.records:
            if rec.base is None:
                continue
            base = rec.base
            if self.origin == "glow":
                if base in ("conv2d", "conv2d_relu", "conv2d_clip", "convdkkc8"):
                    self._glow_conv_attrs(rec)
                elif base in ("maxpool", "avgpool"):
                    self._glow_pool_attrs(rec)
                else:
                    self._glow_generic_layouts(rec)
                continue
            out_idx = len(rec.param_addrs) - rec.n_outputs
            in_spec = rec.param_layouts[0]
            out_spec = rec.param_layouts[out_idx]
            if base == "conv2d":
                kdims = rec.param_layouts[1].logical_dims
                if in_spec.logical_dims[2] != in_spec.logical_dims[3]:
                    raise attrs_mod.RecoveryError(
                        f"{rec.fn}: non-square conv input unsupported"
                    )
                stride, padding = attrs_mod.infer_sp(
                    in_spec.logical_dims[2], out_spec.logical_dims[2], kdims[2]
                )
                rec.attrs.update(
                    {"kernel": kdims[2], "stride": stride, "padding": padding}
                )
            elif base == "maxpool":
                inp = self._logical(rec.fn, 0, rec)
                out = self._logical(rec.fn, out_idx, rec)
                rec.attrs.update(attrs_mod.recover_maxpool(inp, out))
            elif base == "avgpool":
                if rec.attrs.get("kernel") is None:
                    inp = self._logical(rec.fn, 0, rec)
                    out = self._logical(rec.fn, out_idx, rec)
                    rec.attrs.update(
                        attrs_mod.recover_avgpool(
                            rec.pseudocode, backend,
                            in_spec.logical_dims[2], out_spec.logical_dims[2],
                            dumped=(inp, out),
                        )
                    )
            elif base in ("lrn", "clip"):
                rec.attrs.update(
                    attrs_mod.extract_scalar_attrs(rec.pseudocode, backend, base)
                )
            elif base == "concat":
                n_in = len(rec.param_addrs) - rec.n_outputs
                ins = [self._logical(rec.fn, i, rec) for i in range(n_in)]
                out = self._logical(rec.fn, out_idx, rec)
                activation = rec.fused.activation if rec.fused else None
                rec.attrs.update(
                    attrs_mod.recover_concat(ins, out, self.cfg.max_concat_inputs,
                                             activation=activation)
                )
                if rec.attrs.get("shuffle_groups") and rec.fused is not None:
                    rec.fused.suffix = ("reshape", "transpose", "reshape")
            elif base == "transform":
                inp = self._logical(rec.fn, 0, rec)
                out = self._logical(rec.fn, out_idx, rec)
                if not np.array_equal(inp.reshape(out.shape), out):
                    found = attrs_mod.recover_concat([inp], out)
                    rec.attrs.update(found)
            elif base == "transpose":
                inp = self._logical(rec.fn, 0, rec)
                out = self._logical(rec.fn, out_idx, rec)
                rec.attrs["perm"] = attrs_mod.recover_transpose(inp, out)
            elif base == "expand_dim":
                ins, outs = in_spec.logical_dims, out_spec.logical_dims
                axis = next(
                    (i for i in range(len(outs))
                     if outs[i] == 1 and (i >= len(ins) or tuple(outs[:i]) + tuple(outs[i + 1:]) == tuple(ins))),
                    len(outs) - 1,
                )
                rec.attrs["axis"] = axis
            elif base == "pad":
                rec.attrs["pad_h"] = (out_spec.logical_dims[2] - in_spec.logical_dims[2]) // 2
                rec.attrs["pad_w"] = (out_spec.logical_dims[3] - in_spec.logical_dims[3]) // 2
        doc = {
            "origin": self.origin,
            "records": [r.to_json() for r in self.records],
        }
        self._persist("02_attrs.json", doc)
        return self.records

    # --- stage: rebuild ---

    def rebuild(self):
        if self.records is None:
            self.load_records("02_attrs.json")
        if self.cfg.patch_path:
            patch = load_patch(self.cfg.patch_path)
            applied = apply_patch(self.records, patch)
            self.notes["patched"] = applied
        broken = [r for r in self.records if r.base is None]
        if broken:
            report = diagnose_failure_for(broken[0])
            self._write_diagnostic(report)
            raise NeedsPatchError(
                f"{broken[0].fn}: unclassified operator needs a patch file",
                report=report,
            )
        self.graph = build_graph(self.log, self.records)
        weight_warnings = recover_weights(
            self.log, self.graph, quantized=self.cfg.quant_mode is not None
        )
        self.notes["weight_warnings"] = weight_warnings
        repairs = []
        if self.cfg.quant_mode is None:
            try:
                repairs = fix_activation(self.graph, self.log)
            except NeedsPatchError as e:
                if e.report is not None:
                    self._write_diagnostic(e.report)
                raise
        self.notes["activation_repairs"] = repairs
        self.ir = emit_ir(self.graph)
        save_ir(self.ir, self.cfg.out_dir / "model.json",
                self.cfg.out_dir / "weights.bin")
        doc = self.graph.to_json()
        doc["records"] = [r.to_json() for r in self.graph.nodes]
        doc["activation_repairs"] = repairs
        doc["weight_warnings"] = weight_warnings
        self._persist("03_graph.json", doc)
        return self.ir

    def _write_diagnostic(self, report: DiagnosticReport):
        save_diagnostic(report, self.cfg.out_dir / "diagnostic.json",
                        self.cfg.out_dir / "diagnostic.txt")

    # --- stage: quant ---

    def quant(self):
        if self.cfg.quant_mode is None:
            return self.ir
        if self.graph is None or self.ir is None:
            self.rebuild()
        shift_constants = {}
        for rec in self.graph.nodes:
            int_weights = [
                idx for idx in rec.weight_indices()
                if self.graph.weights[(rec.fn, idx)].dtype.kind in ("i", "u")
            ]
            if not int_weights:
                continue
            mult = parse_shift_mult(rec.pseudocode)
            shift_constants[rec.fn] = mult
            for idx in int_weights:
                updated = rescale_weights(self.graph.weights[(rec.fn, idx)], mult)
                self.graph.weights[(rec.fn, idx)] = updated
                self.ir.weights[f"{rec.fn}.p{idx}"] = updated
        multiples = {}
        log_rows = []
        if self.cfg.quant_mode == "kl_divergence":
            if self.cfg.query_dir is None:
                raise LiftError("kl_divergence mode needs --query-dir (inputs + labels)")
            dataset = load_query_dataset(self.cfg.query_dir)
            multiples, log_rows = train_multiples(
                self.ir, dataset,
                TrainConfig(lr=self.cfg.lr, epochs=self.cfg.epochs,
                            batch=self.cfg.batch, seed=self.cfg.seed),
            )
            self.ir = apply_multiples(self.ir, multiples)
            save_training_log(log_rows, self.cfg.out_dir / "training_log.csv")
            write_training_curve(log_rows, self.cfg.out_dir / "training_curve.png")
        save_ir(self.ir, self.cfg.out_dir / "model.json",
                self.cfg.out_dir / "weights.bin")
        self._persist("quant.json", {
            "mode": self.cfg.quant_mode,
            "shift_constants": shift_constants,
            "multiples": multiples,
        })
        return self.ir

    # --- stage: verify ---

    def _verify_data(self):
        cfg = self.cfg
        if cfg.verify_dir is not None:
            vdir = Path(cfg.verify_dir)
            with open(vdir / "meta.json", "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            n = meta["count"]
            ishape = tuple(meta["input_shape"])
            oshape = tuple(meta["output_shape"])
            xs = np.fromfile(vdir / "inputs.bin", dtype="<f4").reshape((n, *ishape))
            ys = np.fromfile(vdir / "outputs.bin", dtype="<f4").reshape((n, *oshape))
            return [xs[i] for i in range(n)], [ys[i] for i in range(n)]
        # fall back to the traced input and final output
        self.ensure_inputs()
        if self.records is None:
            self.load_records("02_attrs.json")
        graph = self.graph or build_graph(self.log, self.records)
        from .repair import dumped_output, traced_input

        x = traced_input(graph, self.log)
        last = graph.nodes[-1]
        y = dumped_output(graph, self.log, last.fn)
        return [x], [y]

    def verify(self):
        if self.ir is None:
            self.ir = load_ir(self.cfg.out_dir / "model.json")
        inputs, refs = self._verify_data()
        report = measure_mia(self.ir, refs, inputs, tol=self.cfg.confidence_tol)
        extra = {
            "quant_mode": self.cfg.quant_mode,
            "notes": self.notes,
        }
        write_report(report, self.cfg.out_dir, prefix="report", extra=extra)
        if self.cfg.min_exact is not None and report.rate("exact") < self.cfg.min_exact:
            raise LiftError(
                f"exact agreement {report.rate('exact'):.3f} below required "
                f"{self.cfg.min_exact:.3f} "
                f"({report.n - report.exact} of {report.n} inputs differ)"
            )
        return report


def diagnose_failure_for(rec) -> DiagnosticReport:
    return DiagnosticReport(
        fn=rec.fn,
        message=rec.error or "unclassified operator",
        candidates=list(rec.candidates),
        dims={
            f"param{i}": list(s.logical_dims)
            for i, s in enumerate(rec.param_layouts)
            if s is not None
        },
        pseudocode=rec.pseudocode,
    )


def run_pipeline(cfg: PipelineConfig):
    """Run every stage; returns (exit_code, summary dict)."""
    pipe = Pipeline(cfg)
    try:
        pipe.extract()
        pipe.classify()
        pipe.attrs()
        pipe.rebuild()
        pipe.quant()
        report = pipe.verify()
    except NeedsPatchError as e:
        return EXIT_NEEDS_PATCH, {"error": str(e), "diagnostic":
                                  str(cfg.out_dir / "diagnostic.json")}
    except LiftError as e:
        return EXIT_STAGE, {"error": str(e)}
    summary = {
        "exact_rate": report.rate("exact"),
        "top1_rate": report.rate("top1"),
        "n": report.n,
        "notes": pipe.notes,
    }
    return EXIT_OK, summary
