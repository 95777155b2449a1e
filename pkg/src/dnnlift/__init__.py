"""dnnlift: recover high-level DNN models from compiled-executable exports."""

from .bundles import FunctionBundle, ParamRecord, load_bundle_file, scan_param_records
from .classify import FusedType, coarse_classify, fine_classify, resolve_fused, taint_until_arith
from .errors import LiftError
from .graph import ComputationGraph, OperatorRecord, build_graph, fix_split_ops, recover_weights
from .ir import ModelIR, forward, load_ir, measure_mia, save_ir
from .layouts import LayoutSpec, block_weights, normalize_dims, reorder_weights
from .pipeline import Pipeline, PipelineConfig, run_pipeline
from .quant import parse_shift_mult, rescale_weights, train_multiples
from .trace import TraceLog, dump_io, load_trace, save_trace

__version__ = "0.1.0"

__all__ = [
    "ComputationGraph",
    "FunctionBundle",
    "FusedType",
    "LayoutSpec",
    "LiftError",
    "ModelIR",
    "OperatorRecord",
    "ParamRecord",
    "Pipeline",
    "PipelineConfig",
    "TraceLog",
    "block_weights",
    "build_graph",
    "coarse_classify",
    "dump_io",
    "fine_classify",
    "fix_split_ops",
    "forward",
    "load_bundle_file",
    "load_ir",
    "load_trace",
    "measure_mia",
    "normalize_dims",
    "parse_shift_mult",
    "recover_weights",
    "reorder_weights",
    "rescale_weights",
    "resolve_fused",
    "run_pipeline",
    "save_ir",
    "save_trace",
    "scan_param_records",
    "taint_until_arith",
    "train_multiples",
]
