"""Command-line interface.

Subcommands mirror the pipeline stages; ``run`` chains them all.  Exit
codes: 0 success, 2 usage, 3 stage failure, 4 repair needs a patch file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import LiftError, NeedsPatchError
from .pipeline import EXIT_NEEDS_PATCH, EXIT_OK, EXIT_STAGE, Pipeline, PipelineConfig, run_pipeline


def _common(p: argparse.ArgumentParser, need_trace=True):
    p.add_argument("--bundle", required=True, help="function bundle JSON file")
    if need_trace:
        p.add_argument("--trace", required=True, help="trace JSONL file")
    p.add_argument("--out", required=True, help="output/working directory")
    p.add_argument("--backend", choices=["rule", "llm"], default="rule")
    p.add_argument("--patch", default=None, help="manual patch JSON file")
    p.add_argument("--quant-mode", choices=["global_scale", "kl_divergence"],
                   default=None)
    p.add_argument("--query-dir", default=None,
                   help="query dataset directory (kl_divergence mode)")
    p.add_argument("--verify-dir", default=None,
                   help="verification dataset directory (inputs/outputs)")
    p.add_argument("--tol", type=float, default=1e-5,
                   help="confidence equality tolerance")
    p.add_argument("--max-concat-inputs", type=int, default=8)
    p.add_argument("--min-exact", type=float, default=None,
                   help="fail verify when exact agreement is below this rate")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def _config(args) -> PipelineConfig:
    return PipelineConfig(
        bundle_path=args.bundle,
        trace_path=getattr(args, "trace", None) or args.bundle,
        out_dir=args.out,
        backend=args.backend,
        quant_mode=args.quant_mode,
        patch_path=Path(args.patch) if args.patch else None,
        query_dir=Path(args.query_dir) if args.query_dir else None,
        verify_dir=Path(args.verify_dir) if args.verify_dir else None,
        confidence_tol=args.tol,
        max_concat_inputs=args.max_concat_inputs,
        min_exact=args.min_exact,
        lr=args.lr,
        epochs=args.epochs,
        batch=args.batch,
        seed=args.seed,
    )


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="generate a synthetic executable export")
    p.add_argument("--model", default="cnn_small",
                   help="zoo model name (see dnnlift.zoo)")
    p.add_argument("--out", required=True)
    p.add_argument("--origin", choices=["tvm", "glow"], default="tvm")
    p.add_argument("--opt-level", choices=["O0", "O3"], default="O0")
    p.add_argument("--nchwc-block", type=int, default=0)
    p.add_argument("--kernel-blocks", type=int, nargs=2, default=(0, 0),
                   metavar=("A", "B"))
    p.add_argument("--quantize", choices=["global_scale", "kl_divergence"],
                   default=None)
    p.add_argument("--reuse-buffers", action="store_true")
    p.add_argument("--faults", nargs="*", default=[],
                   help="fault injections: split_softmax split_avgpool "
                        "split_dense_add hide_activation relu_tail sum_lookalike")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify-inputs", type=int, default=100)
    p.add_argument("--queries", type=int, default=0)


def _run_simulate(args) -> int:
    from . import zoo
    from .simulator import CompileOptions, QuantSpec, simulate

    maker = getattr(zoo, args.model, None)
    if maker is None:
        print(f"unknown zoo model {args.model!r}", file=sys.stderr)
        return 2
    model = maker()
    opts = CompileOptions(
        origin=args.origin,
        opt_level=args.opt_level,
        nchwc_block=args.nchwc_block,
        kernel_blocks=tuple(args.kernel_blocks),
        quantize=QuantSpec(mode=args.quantize) if args.quantize else None,
        reuse_buffers=args.reuse_buffers,
        seed=args.seed,
        faults=tuple(args.faults),
    )
    artifacts = simulate(model, opts, args.out,
                         verify_inputs=args.verify_inputs,
                         query_count=args.queries)
    for key, path in artifacts.items():
        print(f"{key}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dnnlift",
        description="Recover high-level DNN models from compiled-executable exports",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    for name, help_text, need_trace in (
        ("extract", "parse the bundle and list functions/dimension records", False),
        ("classify", "operator type recognition (01_types.json)", True),
        ("attrs", "operator attribute recovery (02_attrs.json)", True),
        ("rebuild", "graph + weights + repairs + model IR", True),
        ("quant", "quantized weight recovery / substitute training", True),
        ("verify", "run the recovered model and report agreement", True),
        ("run", "full pipeline end to end", True),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p, need_trace=need_trace)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return _run_simulate(args)
    cfg = _config(args)
    if args.command == "run":
        code, summary = run_pipeline(cfg)
        print(json.dumps(summary, indent=1, sort_keys=True, default=str))
        return code
    pipe = Pipeline(cfg)
    try:
        if args.command == "extract":
            doc = pipe.extract()
            print(f"{len(doc['functions'])} functions "
                  f"({doc['origin']}) -> {cfg.out_dir / '00_functions.json'}")
        elif args.command == "classify":
            records = pipe.classify()
            ok = sum(1 for r in records if r.base)
            print(f"classified {ok}/{len(records)} -> {cfg.out_dir / '01_types.json'}")
        elif args.command == "attrs":
            pipe.attrs()
            print(f"attributes -> {cfg.out_dir / '02_attrs.json'}")
        elif args.command == "rebuild":
            pipe.rebuild()
            print(f"model IR -> {cfg.out_dir / 'model.json'}")
        elif args.command == "quant":
            pipe.rebuild()
            pipe.quant()
            print(f"quantized recovery -> {cfg.out_dir / 'model.json'}")
        elif args.command == "verify":
            report = pipe.verify()
            print(f"exact {report.rate('exact'):.3f} top1 {report.rate('top1'):.3f} "
                  f"on {report.n} inputs -> {cfg.out_dir / 'report.json'}")
    except NeedsPatchError as e:
        print(f"needs patch: {e}", file=sys.stderr)
        print(f"diagnostic: {cfg.out_dir / 'diagnostic.json'}", file=sys.stderr)
        return EXIT_NEEDS_PATCH
    except LiftError as e:
        print(f"{args.command} failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
