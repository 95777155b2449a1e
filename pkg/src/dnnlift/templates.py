"""Pseudocode template library.

Renders decompiler-style C pseudocode for every supported operator and, next
to each template, defines the structural patterns the rule classifier uses to
recognize it.  Renders are randomized (variable names, loop order where
semantics allow) so recognition can never degenerate into string equality.

Statement conventions the renderers guarantee and the detectors rely on:

  * index arithmetic inside a memory access is spaceless (``(oc*28+oh)*28+ow``),
  * top-level operators are spaced (``fAcc + *(float *)(...) * *(float *)(...)``),
  * one statement per line.

GLOW renders additionally keep the kernel-size loops as the first two
adjacent loops (pools then put the channel loop immediately after), because
attribute recovery for GLOW reads those extents from the code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from math import prod


# ---------------------------------------------------------------------------
# operator vocabulary
# ---------------------------------------------------------------------------

TVM_OPS = (
    "concat", "split", "pad", "flatten", "transform", "reshape", "expand_dim",
    "transpose", "add", "sub", "mul", "div", "power", "softmax", "sqrt",
    "rsqrt", "clip", "neg", "abs", "lrn", "relu", "exp", "maxpool", "avgpool",
    "sum", "max", "conv2d", "dense",
)

GLOW_OPS = (
    "maxpool", "avgpool", "softmax", "relu", "lrn", "add", "sub", "mul",
    "dense", "conv2d", "convdkkc8", "conv2d_relu", "conv2d_clip",
    "tensor_transformation",
)

ELEMENTWISE_UNARY = ("softmax", "sqrt", "rsqrt", "clip", "neg", "abs", "lrn", "relu", "exp")
ELEMENTWISE_BINARY = ("add", "sub", "mul", "div", "power")
REDUCTIONS = ("maxpool", "avgpool", "sum", "max")

SHIFT_MULT_RE = re.compile(r"\(0x([0-9a-fA-F]+) >> 0x([0-9a-fA-F]+)\)")


def fmt_const(v) -> str:
    f = float(v)
    if f == int(f) and abs(f) < 1e6:
        return f"{f:.1f}"
    return f"{f:.6g}"


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderSpec:
    base: str
    params: int
    in_dims: tuple = ()
    out_dims: tuple = ()
    attrs: dict = field(default_factory=dict)
    extras: tuple = ()           # ('add'|'mul'|'jumpadd'), conv/dense param order
    activation: tuple | None = None   # ('relu',) or ('clip', lo, hi)
    origin: str = "tvm"
    quant: tuple | None = None   # (hex_value, shift) requantization constant
    glow_c8: bool = False
    fault: str | None = None     # 'hide_activation' | 'relu_tail' | 'sum_lookalike'
    n_inputs: int = 1
    sections: tuple = ()
    extra_dims: tuple = ()       # dims of binary second operand (broadcast or full)


class _Writer:
    def __init__(self, rng):
        self.rng = rng
        self.lines: list[str] = []
        self.depth = 1
        ipre = rng.choice(["iVar", "uVar", "local_i"])
        fpre = rng.choice(["fVar", "local_f", "fStack"])
        self._ipre, self._fpre = ipre, fpre
        self._n = int(rng.integers(1, 7))

    def ivar(self):
        self._n += 1
        return f"{self._ipre}{self._n}"

    def fvar(self):
        self._n += 1
        return f"{self._fpre}{self._n}"

    def put(self, text):
        self.lines.append("  " * self.depth + text)

    def open_loop(self, var, n, start="0", cmp="<"):
        self.put(f"for ({var} = {start}; {var} {cmp} {n}; {var} = {var} + 1) {{")
        self.depth += 1

    def close(self, count=1):
        for _ in range(count):
            self.depth -= 1
            self.put("}")

    def text(self, name, params):
        sig = ", ".join(f"long param_{i + 1}" for i in range(params))
        return f"void {name}({sig})\n{{\n" + "\n".join(self.lines) + "\n}\n"


def _fload(p, idx):
    return f"*(float *)(param_{p} + ({idx})*4)" if idx else f"*(float *)(param_{p})"


def _qload(p, idx, width="char"):
    sz = {"char": 1, "int": 4}[width]
    off = f"({idx})*{sz}" if sz > 1 else f"({idx})"
    return f"(float)(int)*({width} *)(param_{p} + {off})"


def _shuffled(rng, items):
    items = list(items)
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def _activation_tail(w: _Writer, spec: RenderSpec, out_param: int, numel: int):
    act = spec.activation
    if act is None or spec.fault == "hide_activation":
        return
    if spec.fault == "relu_tail":
        act = ("relu",)
    i = w.ivar()
    unroll = 4
    w.open_loop(i, numel, cmp="<")
    # the unrolled clamp block is the repeated tail pattern activations leave
    for u in range(unroll):
        idx = i if u == 0 else f"{i}+{u}"
        dst = _fload(out_param, idx)
        if act[0] == "relu":
            w.put(f"{dst} = fmaxf({dst}, 0.0);")
        else:
            lo, hi = fmt_const(act[1]), fmt_const(act[2])
            w.put(f"{dst} = fminf(fmaxf({dst}, {lo}), {hi});")
    w.close()
    # step the loop by the unroll factor
    w.lines[-unroll - 1 - 1] = w.lines[-unroll - 1 - 1].replace(
        f"{i} = {i} + 1", f"{i} = {i} + {unroll}"
    )


def _conv_indices(spec):
    c_in, h_in, w_in = spec.in_dims[1], spec.in_dims[2], spec.in_dims[3]
    c_out, h_out, w_out = spec.out_dims[1], spec.out_dims[2], spec.out_dims[3]
    k = spec.attrs["kernel"]
    s = spec.attrs.get("stride", 1)
    p = spec.attrs.get("padding", 0)
    return c_in, h_in, w_in, c_out, h_out, w_out, k, s, p


def _window_expr(o, kvar, s, p):
    expr = f"{o}*{s}" if s != 1 else o
    expr += f"+{kvar}"
    if p:
        expr += f"-{p}"
    return expr


def _render_conv(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    ci, hi_, wi, co, ho, wo, k, s, p = _conv_indices(spec)
    acc = w.fvar()
    oc, oh, ow = w.ivar(), w.ivar(), w.ivar()
    ic, kh, kw = w.ivar(), w.ivar(), w.ivar()
    w.put(f"float {acc};")
    glow = spec.origin == "glow"
    if glow:
        # kernel loops first: attribute recovery reads K from these extents
        for var, n in ((kh, k), (kw, k), (oc, co), (oh, ho), (ow, wo), (ic, ci)):
            w.open_loop(var, n)
        in_idx = f"({ic}*{hi_}+{_window_expr(oh, kh, s, p)})*{wi}+{_window_expr(ow, kw, s, p)}"
        out_idx = f"({oc}*{ho}+{oh})*{wo}+{ow}"
        if spec.glow_c8:
            w_idx = f"((({oc}>>3)*{k}+{kh})*{k}+{kw})*{ci}*8+({ic})*8+({oc}&7)"
        else:
            w_idx = f"(({oc}*{ci}+{ic})*{k}+{kh})*{k}+{kw}"
        dst = _fload(spec.params, out_idx)
        w.put(f"{dst} = {dst} + {_fload(1, in_idx)} * {_fload(2, w_idx)};")
        w.close(6)
    else:
        for var, n in _shuffled(rng, [(oc, co), (oh, ho), (ow, wo)]):
            w.open_loop(var, n)
        w.put(f"{acc} = 0.0;")
        for var, n in _shuffled(rng, [(ic, ci), (kh, k), (kw, k)]):
            w.open_loop(var, n)
        in_idx = f"({ic}*{hi_}+{_window_expr(oh, kh, s, p)})*{wi}+{_window_expr(ow, kw, s, p)}"
        w_idx = f"(({oc}*{ci}+{ic})*{k}+{kh})*{k}+{kw}"
        if spec.quant:
            hexv, shift = spec.quant
            factor = f"({_qload(2, w_idx)} * (float)(0x{hexv:x} >> 0x{shift:x}))"
            w.put(f"{acc} = {acc} + {_qload(1, in_idx)} * {factor};")
        else:
            w.put(f"{acc} = {acc} + {_fload(1, in_idx)} * {_fload(2, w_idx)};")
        w.close(3)
        for j, kind in enumerate(spec.extras):
            pn = 3 + j
            if kind == "add":
                load = _qload(pn, f"{oc}", "int") if spec.quant else _fload(pn, f"{oc}")
                w.put(f"{acc} = {acc} + {load};")
            elif kind == "mul":
                w.put(f"{acc} = {acc} * {_fload(pn, f'{oc}')};")
            else:  # jumpadd
                w.put(f"{acc} = {acc} + {_fload(pn, f'({oc}*{ho}+{oh})*{wo}+{ow}')};")
        w.put(f"{_fload(spec.params, f'({oc}*{ho}+{oh})*{wo}+{ow}')} = {acc};")
        w.close(3)
    _activation_tail(w, spec, spec.params, prod(spec.out_dims))
    return w.text(name, spec.params)


def _render_dense(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    d = spec.in_dims[-1]
    o = spec.out_dims[-1]
    acc = w.fvar()
    oo, dd = w.ivar(), w.ivar()
    w.put(f"float {acc};")
    w.open_loop(oo, o)
    w.put(f"{acc} = 0.0;")
    w.open_loop(dd, d)
    if spec.quant:
        hexv, shift = spec.quant
        factor = f"({_qload(2, f'{oo}*{d}+{dd}')} * (float)(0x{hexv:x} >> 0x{shift:x}))"
        w.put(f"{acc} = {acc} + {_qload(1, f'{dd}')} * {factor};")
    else:
        w.put(f"{acc} = {acc} + {_fload(1, f'{dd}')} * {_fload(2, f'{oo}*{d}+{dd}')};")
    w.close()
    for j, kind in enumerate(spec.extras):
        pn = 3 + j
        if kind == "add":
            load = _qload(pn, f"{oo}", "int") if spec.quant else _fload(pn, f"{oo}")
            w.put(f"{acc} = {acc} + {load};")
        elif kind == "mul":
            w.put(f"{acc} = {acc} * {_fload(pn, f'{oo}')};")
        else:
            w.put(f"{acc} = {acc} + {_fload(pn, f'{oo}')};")
    w.put(f"{_fload(spec.params, f'{oo}')} = {acc};")
    w.close()
    _activation_tail(w, spec, spec.params, prod(spec.out_dims))
    return w.text(name, spec.params)


def _render_pool(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    ci, hi_, wi, co, ho, wo, k, s, p = _conv_indices(spec)
    acc = w.fvar()
    c, oh, ow, kh, kw = w.ivar(), w.ivar(), w.ivar(), w.ivar(), w.ivar()
    h_i, w_i = w.ivar(), w.ivar()
    w.put(f"float {acc};")
    glow = spec.origin == "glow"
    kind = spec.base
    if glow:
        loops = [(kh, k), (kw, k), (c, ci), (oh, ho), (ow, wo)]
    else:
        loops = _shuffled(rng, [(c, ci), (oh, ho), (ow, wo)]) + [(kh, k), (kw, k)]
    if glow:
        # in-memory accumulation so the kernel loops can stay outermost
        for var, n in loops:
            w.open_loop(var, n)
        dst = _fload(spec.params, f"({c}*{ho}+{oh})*{wo}+{ow}")
        src = _fload(1, f"({c}*{hi_}+{_window_expr(oh, kh, s, p)})*{wi}+{_window_expr(ow, kw, s, p)}")
        if kind == "maxpool":
            w.put(f"{dst} = fmaxf({dst}, {src});")
        else:
            w.put(f"{dst} = {dst} + {src};")
        w.close(5)
        if kind == "avgpool" and spec.fault != "sum_lookalike":
            i = w.ivar()
            w.open_loop(i, co * ho * wo)
            dst = _fload(spec.params, i)
            w.put(f"{dst} = {dst} * {1.0 / (k * k):.6f};")
            w.close()
    else:
        for var, n in loops[:3]:
            w.open_loop(var, n)
        w.put(f"{acc} = 0.0;" if kind != "maxpool" else f"{acc} = -3.402823e+38;")
        for var, n in loops[3:]:
            w.open_loop(var, n)
        w.put(f"{h_i} = {_window_expr(oh, kh, s, p)};")
        w.put(f"{w_i} = {_window_expr(ow, kw, s, p)};")
        if p:
            w.put(f"if ((-1 < {h_i}) && ({h_i} < {hi_}) && (-1 < {w_i}) && ({w_i} < {wi})) {{")
            w.depth += 1
        src = _fload(1, f"({c}*{hi_}+{h_i})*{wi}+{w_i}")
        if kind == "maxpool":
            w.put(f"{acc} = fmaxf({acc}, {src});")
        else:
            w.put(f"{acc} = {acc} + {src};")
        if p:
            w.close()
        w.close(2)
        out = _fload(spec.params, f"({c}*{ho}+{oh})*{wo}+{ow}")
        if kind == "avgpool" and spec.fault != "sum_lookalike":
            w.put(f"{out} = {acc} * {1.0 / (k * k):.6f};")
        else:
            w.put(f"{out} = {acc};")
        w.close(3)
    return w.text(name, spec.params)


def _render_reduce(name, spec: RenderSpec, rng) -> str:
    """Spatial sum/max reduction (axes 2,3 kept as size 1)."""
    w = _Writer(rng)
    ci, hi_, wi = spec.in_dims[1], spec.in_dims[2], spec.in_dims[3]
    acc = w.fvar()
    c, h, ww = w.ivar(), w.ivar(), w.ivar()
    w.put(f"float {acc};")
    w.open_loop(c, ci)
    w.put(f"{acc} = 0.0;" if spec.base == "sum" else f"{acc} = -3.402823e+38;")
    w.open_loop(h, hi_)
    w.open_loop(ww, wi)
    src = _fload(1, f"({c}*{hi_}+{h})*{wi}+{ww}")
    if spec.base == "sum":
        w.put(f"{acc} = {acc} + {src};")
    else:
        w.put(f"{acc} = fmaxf({acc}, {src});")
    w.close(2)
    w.put(f"{_fload(spec.params, c)} = {acc};")
    w.close()
    return w.text(name, spec.params)


def _render_softmax(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    n = prod(spec.in_dims)
    m, sm, e, i, j, kk = w.fvar(), w.fvar(), w.fvar(), w.ivar(), w.ivar(), w.ivar()
    w.put(f"float {m};")
    w.put(f"{m} = -3.402823e+38;")
    w.open_loop(i, n)
    w.put(f"{m} = fmaxf({m}, {_fload(1, i)});")
    w.close()
    w.put(f"{sm} = 0.0;")
    w.open_loop(j, n)
    w.put(f"{e} = expf({_fload(1, j)} - {m});")
    w.put(f"{_fload(spec.params, j)} = {e};")
    w.put(f"{sm} = {sm} + {e};")
    w.close()
    w.open_loop(kk, n)
    dst = _fload(spec.params, kk)
    w.put(f"{dst} = {dst} / {sm};")
    w.close()
    return w.text(name, spec.params)


def _render_elementwise_unary(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    n = prod(spec.in_dims)
    i = w.ivar()
    w.open_loop(i, n)
    src = _fload(1, i)
    base = spec.base
    if base == "relu":
        rhs = f"fmaxf({src}, 0.0)"
    elif base == "clip":
        lo, hi = fmt_const(spec.attrs["min"]), fmt_const(spec.attrs["max"])
        rhs = f"fminf(fmaxf({src}, {lo}), {hi})"
    elif base == "sqrt":
        rhs = f"sqrtf({src})"
    elif base == "rsqrt":
        rhs = f"1.0 / sqrtf({src})"
    elif base == "exp":
        rhs = f"expf({src})"
    elif base == "neg":
        rhs = f"-{src}"
    elif base == "abs":
        rhs = f"ABS({src})"
    else:
        raise ValueError(base)
    w.put(f"{_fload(spec.params, i)} = {rhs};")
    w.close()
    return w.text(name, spec.params)


def _render_lrn(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    ci, hw = spec.in_dims[1], prod(spec.in_dims[2:])
    size = int(spec.attrs["size"])
    half = (size - 1) // 2
    alpha, beta, bias = spec.attrs["alpha"], spec.attrs["beta"], spec.attrs["bias"]
    acc, v = w.fvar(), w.fvar()
    c, i, d, kc = w.ivar(), w.ivar(), w.ivar(), w.ivar()
    w.put(f"float {acc};")
    w.open_loop(c, ci)
    w.open_loop(i, hw)
    w.put(f"{acc} = 0.0;")
    w.open_loop(d, size)
    w.put(f"{kc} = {c} + {d} - {half};")
    w.put(f"if ((-1 < {kc}) && ({kc} < {ci})) {{")
    w.depth += 1
    w.put(f"{v} = {_fload(1, f'{kc}*{hw}+{i}')};")
    w.put(f"{acc} = {acc} + {v} * {v};")
    w.close()
    w.close()
    norm = f"powf({fmt_const(bias)} + {fmt_const(alpha)} * {acc} / {fmt_const(size)}, -{fmt_const(beta)})"
    w.put(f"{_fload(spec.params, f'{c}*{hw}+{i}')} = {_fload(1, f'{c}*{hw}+{i}')} * {norm};")
    w.close(2)
    return w.text(name, spec.params)


def _render_binary(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    full = prod(spec.out_dims)
    b_numel = prod(spec.extra_dims) if spec.extra_dims else full
    op = {"add": "+", "sub": "-", "mul": "*", "div": "/"}.get(spec.base)
    if b_numel != full and len(spec.out_dims) == 4:
        # channel-broadcast second operand
        ci, hw = spec.out_dims[1], spec.out_dims[2] * spec.out_dims[3]
        c, i = w.ivar(), w.ivar()
        w.open_loop(c, ci)
        w.open_loop(i, hw)
        a = _fload(1, f"{c}*{hw}+{i}")
        b = _fload(2, c)
        dst = _fload(spec.params, f"{c}*{hw}+{i}")
        rhs = f"powf({a}, {b})" if spec.base == "power" else f"{a} {op} {b}"
        w.put(f"{dst} = {rhs};")
        w.close(2)
    else:
        i = w.ivar()
        w.open_loop(i, full)
        a, b = _fload(1, i), _fload(2, i)
        rhs = f"powf({a}, {b})" if spec.base == "power" else f"{a} {op} {b}"
        w.put(f"{_fload(spec.params, i)} = {rhs};")
        w.close()
    _activation_tail(w, spec, spec.params, full)
    return w.text(name, spec.params)


def _render_copy(name, spec: RenderSpec, rng) -> str:
    """flatten / reshape / expand_dim: linear copy."""
    w = _Writer(rng)
    i = w.ivar()
    w.open_loop(i, prod(spec.in_dims))
    w.put(f"{_fload(spec.params, i)} = {_fload(1, i)};")
    w.close()
    return w.text(name, spec.params)


def _render_transpose(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    perm = spec.attrs["perm"]
    dims = spec.in_dims
    vs = [w.ivar() for _ in dims]
    for v, n in zip(vs, dims):
        w.open_loop(v, n)

    def flat(order_dims, order_vars):
        expr = order_vars[0]
        for dmn, vv in zip(order_dims[1:], order_vars[1:]):
            expr = f"({expr}*{dmn}+{vv})"
        return expr

    src = flat(dims, vs)
    out_dims = tuple(dims[p] for p in perm)
    out_vars = [vs[p] for p in perm]
    dst = flat(out_dims, out_vars)
    w.put(f"{_fload(spec.params, dst)} = {_fload(1, src)};")
    w.close(len(dims))
    return w.text(name, spec.params)


def _render_transform(name, spec: RenderSpec, rng) -> str:
    """Layout-blocking copy (NCHW <-> blocked); '%'-based index remap."""
    w = _Writer(rng)
    to_blocked = len(spec.out_dims) == 5
    blk = spec.out_dims[4] if to_blocked else spec.in_dims[4]
    four = spec.in_dims if not to_blocked else (
        spec.in_dims[0], spec.in_dims[1], spec.in_dims[2], spec.in_dims[3])
    _, c, h, ww = four if len(four) == 4 else (1, four[1], four[2], four[3])
    hw = h * ww
    cc, i = w.ivar(), w.ivar()
    w.open_loop(cc, c)
    w.open_loop(i, hw)
    blocked = f"(({cc}/{blk})*{hw}+{i})*{blk}+{cc}%{blk}"
    plain = f"{cc}*{hw}+{i}"
    if to_blocked:
        w.put(f"{_fload(spec.params, blocked)} = {_fload(1, plain)};")
    else:
        w.put(f"{_fload(spec.params, plain)} = {_fload(1, blocked)};")
    w.close(2)
    return w.text(name, spec.params)


def _render_concat(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    offset = 0
    for k in range(spec.n_inputs):
        n = prod(spec.attrs["input_dims"][k])
        i = w.ivar()
        w.open_loop(i, n)
        dst_idx = f"{i}+{offset}" if offset else i
        w.put(f"{_fload(spec.params, dst_idx)} = {_fload(k + 1, i)};")
        w.close()
        offset += n
    _activation_tail(w, spec, spec.params, offset)
    return w.text(name, spec.params)


def _render_split(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    offset = 0
    for k, sec_numel in enumerate(spec.sections):
        i = w.ivar()
        w.open_loop(i, sec_numel)
        src_idx = f"{i}+{offset}" if offset else i
        w.put(f"{_fload(k + 2, i)} = {_fload(1, src_idx)};")
        w.close()
        offset += sec_numel
    return w.text(name, spec.params)


def _render_pad(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    _, c, h, ww = spec.in_dims
    _, _, oh, ow = spec.out_dims
    ph = spec.attrs.get("pad_h", 0)
    pw = spec.attrs.get("pad_w", 0)
    i = w.ivar()
    w.open_loop(i, prod(spec.out_dims))
    w.put(f"{_fload(spec.params, i)} = 0.0;")
    w.close()
    cc, hh, wv = w.ivar(), w.ivar(), w.ivar()
    for var, n in ((cc, c), (hh, h), (wv, ww)):
        w.open_loop(var, n)
    dst = f"({cc}*{oh}+{hh}+{ph})*{ow}+{wv}+{pw}"
    w.put(f"{_fload(spec.params, dst)} = {_fload(1, f'({cc}*{h}+{hh})*{ww}+{wv}')};")
    w.close(3)
    return w.text(name, spec.params)


def _render_tensor_transformation(name, spec: RenderSpec, rng) -> str:
    w = _Writer(rng)
    i = w.ivar()
    off = spec.attrs.get("offset", 0)
    w.open_loop(i, prod(spec.out_dims))
    src = f"{i}+{off}" if off else i
    w.put(f"{_fload(spec.params, i)} = {_fload(1, src)};")
    w.close()
    return w.text(name, spec.params)


# split-operator stage templates (fault injection)

def _render_softmax_norm(name, spec: RenderSpec, rng) -> str:
    """In-place divide-by-sum: second half of a split softmax."""
    w = _Writer(rng)
    n = prod(spec.in_dims)
    sm, i, j = w.fvar(), w.ivar(), w.ivar()
    w.put(f"{sm} = 0.0;")
    w.open_loop(i, n)
    w.put(f"{sm} = {sm} + {_fload(1, i)};")
    w.close()
    w.open_loop(j, n)
    dst = _fload(2, j)
    w.put(f"{dst} = {_fload(1, j)} / {sm};")
    w.close()
    return w.text(name, spec.params)


def _render_pool_scale(name, spec: RenderSpec, rng) -> str:
    """In-place multiply by 1/k^2: second half of a split avgpool."""
    w = _Writer(rng)
    k = spec.attrs["kernel"]
    i = w.ivar()
    w.open_loop(i, prod(spec.in_dims))
    dst = _fload(2, i)
    w.put(f"{dst} = {_fload(1, i)} * {1.0 / (k * k):.6f};")
    w.close()
    return w.text(name, spec.params)


_RENDERERS = {
    "conv2d": _render_conv,
    "convdkkc8": _render_conv,
    "dense": _render_dense,
    "maxpool": _render_pool,
    "avgpool": _render_pool,
    "sum": _render_reduce,
    "max": _render_reduce,
    "softmax": _render_softmax,
    "lrn": _render_lrn,
    "relu": _render_elementwise_unary,
    "clip": _render_elementwise_unary,
    "sqrt": _render_elementwise_unary,
    "rsqrt": _render_elementwise_unary,
    "exp": _render_elementwise_unary,
    "neg": _render_elementwise_unary,
    "abs": _render_elementwise_unary,
    "add": _render_binary,
    "sub": _render_binary,
    "mul": _render_binary,
    "div": _render_binary,
    "power": _render_binary,
    "flatten": _render_copy,
    "reshape": _render_copy,
    "expand_dim": _render_copy,
    "transpose": _render_transpose,
    "transform": _render_transform,
    "concat": _render_concat,
    "split": _render_split,
    "pad": _render_pad,
    "tensor_transformation": _render_tensor_transformation,
    "_softmax_norm": _render_softmax_norm,
    "_pool_scale": _render_pool_scale,
    "_window_sum": _render_pool,
}


def render(name: str, spec: RenderSpec, rng) -> str:
    base = spec.base
    if base == "_window_sum":
        spec = RenderSpec(**{**spec.__dict__, "base": "avgpool", "fault": "sum_lookalike"})
        return _render_pool(name, spec, rng)
    if base == "convdkkc8":
        spec = RenderSpec(**{**spec.__dict__, "base": "conv2d", "glow_c8": True})
        return _render_conv(name, spec, rng)
    fn = _RENDERERS.get(base)
    if fn is None:
        raise ValueError(f"no template for operator {base!r}")
    return fn(name, spec, rng)


# ---------------------------------------------------------------------------
# structural feature extraction (the rule classifier's view of pseudocode)
# ---------------------------------------------------------------------------

_LOAD_STARTS = ("*(float *)(", "*(char *)(", "*(int *)(")


def _scan_loads(expr: str):
    """Replace every memory access with a token ``L<i>``.

    Returns (reduced expression, list of (param_number, full_text)).  Paren
    balancing handles arbitrarily nested index arithmetic, which is why the
    detectors can reason about top-level operators at all.
    """
    out = []
    loads = []
    i = 0
    n = len(expr)
    while i < n:
        hit = None
        for pat in _LOAD_STARTS:
            if expr.startswith(pat, i):
                hit = pat
                break
        if hit is None:
            out.append(expr[i])
            i += 1
            continue
        j = i + len(hit)
        depth = 1
        while j < n and depth:
            if expr[j] == "(":
                depth += 1
            elif expr[j] == ")":
                depth -= 1
            j += 1
        inner = expr[i + len(hit) : j - 1]
        m = re.match(r"param_(\d+)", inner)
        loads.append((m.group(1) if m else "?", expr[i:j]))
        out.append(f"L{len(loads) - 1}")
        i = j
    return "".join(out), loads


@dataclass
class _Features:
    n_loops: int = 0
    mac: bool = False            # acc = acc + X * Y
    sq_acc: bool = False         # acc = acc + V * V
    load_acc: bool = False       # acc = acc + <load>
    fmax_acc: bool = False       # acc = fmaxf(acc, ...)
    recip_mul: float | None = None   # " * 0.xxx" constant < 1
    scalar_scale: float | None = None  # store = <load> * 0.xxx
    inplace_div: bool = False
    copy_sources: set = field(default_factory=set)
    copy_dests: set = field(default_factory=set)
    zero_fill: bool = False
    binary_op: str | None = None     # add/sub/mul/div/power between two loads
    has_expf: bool = False
    has_sqrtf: bool = False
    has_rsqrt: bool = False
    has_powf_load: bool = False
    has_powf: bool = False
    has_abs: bool = False
    has_neg_load: bool = False
    has_fminf: bool = False
    has_relu_const: bool = False
    has_c8_mask: bool = False
    has_mod: bool = False


def _split_statements(text: str):
    for line in text.splitlines():
        s = line.strip()
        if not s or s.startswith(("for ", "if ", "}", "{", "void ", "float ", "long ", "int ")):
            continue
        if s.endswith(";"):
            yield s[:-1]


def extract_features(text: str) -> _Features:
    f = _Features()
    f.n_loops = text.count("for (")
    f.has_expf = "expf(" in text
    f.has_rsqrt = "1.0 / sqrtf(" in text or "rsqrtf(" in text
    f.has_sqrtf = "sqrtf(" in text
    f.has_powf = "powf(" in text
    f.has_abs = "ABS(" in text
    f.has_fminf = "fminf(" in text
    f.has_relu_const = bool(re.search(r"fmaxf\([^;]*, 0\.0\)", text))
    f.has_c8_mask = "&7)" in text and ">>3)" in text
    f.has_mod = "%" in text
    recip_re = re.compile(r" \* (0\.\d+)")
    for stmt in _split_statements(text):
        if " = " not in stmt:
            continue
        lhs_raw, rhs_raw = stmt.split(" = ", 1)
        lhs_red, lhs_loads = _scan_loads(lhs_raw.strip())
        rhs_red, rhs_loads = _scan_loads(rhs_raw.strip())
        is_store = lhs_red == "L0" and lhs_loads
        m_recip = recip_re.search(rhs_red)
        if m_recip and 0 < float(m_recip.group(1)) < 1:
            f.recip_mul = float(m_recip.group(1))
        if rhs_red.startswith("powf(L"):
            f.has_powf_load = True

        # accumulator updates: lhs may be a scalar or the output cell itself
        acc_name = None
        if not is_store:
            acc_name = lhs_red
            rest = None
            if rhs_red.startswith(acc_name + " + "):
                rest = rhs_red[len(acc_name) + 3 :]
            if rest is not None:
                if " * " in rest:
                    a, _, b = rest.partition(" * ")
                    if a == b:
                        f.sq_acc = True
                    else:
                        f.mac = True
                elif re.fullmatch(r"(?:\(float\)\(int\))?L\d+", rest):
                    f.load_acc = True
                continue
            if rhs_red.startswith(f"fmaxf({acc_name},"):
                f.fmax_acc = True
                continue
        else:
            lhs_text = lhs_loads[0][1]
            if rhs_loads and rhs_loads[0][1] == lhs_text:
                rest = None
                if rhs_red.startswith("L0 + "):
                    rest = rhs_red[5:]
                    if " * " in rest:
                        f.mac = True
                    else:
                        f.load_acc = True
                    continue
                if rhs_red.startswith("fmaxf(L0,"):
                    f.fmax_acc = True
                    continue

        if not is_store:
            continue

        # store statements
        dst = lhs_loads[0][0]
        if rhs_red == "0.0":
            f.zero_fill = True
        elif re.fullmatch(r"L0 \* 0\.\d+", rhs_red):
            f.scalar_scale = float(rhs_red[5:])
        elif re.fullmatch(r"L0 / \w+", rhs_red) and len(rhs_loads) == 1:
            f.inplace_div = True
        elif rhs_red == "L0":
            f.copy_sources.add(rhs_loads[0][0])
            f.copy_dests.add(dst)
        elif rhs_red == "-L0":
            f.has_neg_load = True
        else:
            m = re.fullmatch(r"L0 (\+|-|\*|/) L1", rhs_red)
            if m:
                f.binary_op = {"+": "add", "-": "sub", "*": "mul", "/": "div"}[m.group(1)]
            elif re.fullmatch(r"powf\(L0, L1\)", rhs_red):
                f.binary_op = "power"
    return f


def loop_extents(text: str) -> list[int]:
    """Literal loop bounds in source order."""
    return [int(m.group(1)) for m in re.finditer(r"for \(\w+ = [^;]*; \w+ <=? (\d+);", text)]


# detector predicates, most specific first

def _tail_lines(text: str) -> str:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    n = max(10, -(-len(lines) // 4))
    return "\n".join(lines[-n:])


def check_activation_tail(text: str):
    """Look for a trailing clamp pattern; returns ('relu',), ('clip', lo, hi) or None."""
    tail = _tail_lines(text)
    clip = re.search(r"fminf\(fmaxf\([^,]+, (-?[\d.eE+]+)\), (-?[\d.eE+]+)\)", tail)
    if clip:
        return ("clip", float(clip.group(1)), float(clip.group(2)))
    if re.search(r"fmaxf\([^;]*, 0\.0\)", tail):
        return ("relu",)
    return None


def _p_conv(f, text):
    return f.mac and f.n_loops >= 5


def _p_dense(f, text):
    return f.mac and f.n_loops <= 4


_PREDICATES = {
    "convdkkc8": lambda f, t: f.mac and f.has_c8_mask,
    "conv2d_clip": lambda f, t: _p_conv(f, t) and (check_activation_tail(t) or ("",))[0] == "clip",
    "conv2d_relu": lambda f, t: _p_conv(f, t) and (check_activation_tail(t) or ("",))[0] == "relu",
    "conv2d": _p_conv,
    "dense": _p_dense,
    "lrn": lambda f, t: f.has_powf and f.sq_acc,
    "maxpool": lambda f, t: f.fmax_acc and f.n_loops >= 5,
    "avgpool": lambda f, t: f.load_acc and (f.recip_mul is not None or f.scalar_scale is not None),
    "softmax": lambda f, t: f.has_expf and f.inplace_div,
    "rsqrt": lambda f, t: f.has_rsqrt,
    "sqrt": lambda f, t: f.has_sqrtf and not f.has_rsqrt,
    "power": lambda f, t: f.binary_op == "power" or f.has_powf_load,
    "clip": lambda f, t: f.has_fminf and f.has_relu_const,
    "relu": lambda f, t: f.has_relu_const and not f.has_fminf,
    "abs": lambda f, t: f.has_abs,
    "neg": lambda f, t: f.has_neg_load,
    "exp": lambda f, t: f.has_expf,
    "div": lambda f, t: f.binary_op == "div",
    "sub": lambda f, t: f.binary_op == "sub",
    "add": lambda f, t: f.binary_op == "add",
    "mul": lambda f, t: f.binary_op == "mul",
    "sum": lambda f, t: f.load_acc and f.recip_mul is None,
    "max": lambda f, t: f.fmax_acc,
    "concat": lambda f, t: len(f.copy_sources) >= 2 and len(f.copy_dests) == 1,
    "split": lambda f, t: len(f.copy_dests) >= 2 and len(f.copy_sources) == 1,
    "pad": lambda f, t: f.zero_fill and len(f.copy_sources) >= 1,
    "transform": lambda f, t: len(f.copy_sources) >= 1 and f.has_mod,
    "transpose": lambda f, t: len(f.copy_sources) == 1 and f.n_loops >= 3,
    "flatten": lambda f, t: len(f.copy_sources) == 1,
    "reshape": lambda f, t: len(f.copy_sources) == 1,
    "expand_dim": lambda f, t: len(f.copy_sources) == 1,
    "tensor_transformation": lambda f, t: len(f.copy_sources) >= 1 and f.binary_op is None,
}

_PRIORITY = list(_PREDICATES)


def detect(text: str, candidates) -> str | None:
    """Pick the first candidate whose structural pattern matches the code."""
    f = extract_features(text)
    cand = set(candidates)
    for op in _PRIORITY:
        if op in cand and _PREDICATES[op](f, text):
            return op
    return None


# ---------------------------------------------------------------------------
# constant extraction for attribute recovery
# ---------------------------------------------------------------------------

def extract_reciprocal(text: str) -> float | None:
    """The 1/k^2 scale an average pool leaves in the code."""
    f = extract_features(text)
    if f.recip_mul is not None:
        return f.recip_mul
    if f.scalar_scale is not None:
        return f.scalar_scale
    m = re.search(r" \* (0\.\d+)", text)
    return float(m.group(1)) if m else None


def extract_clip_bounds(text: str) -> tuple[float, float] | None:
    m = re.search(r"fminf\(fmaxf\([^,]+, (-?[\d.eE+]+)\), (-?[\d.eE+]+)\)", text)
    if not m:
        return None
    return float(m.group(1)), float(m.group(2))


def extract_lrn_attrs(text: str) -> dict | None:
    m = re.search(
        r"powf\((-?[\d.eE+-]+) \+ (-?[\d.eE+-]+) \* \w+ / (-?[\d.eE+-]+), -(-?[\d.eE+-]+)\)",
        text,
    )
    if not m:
        return None
    bias, alpha, size, beta = (float(m.group(i)) for i in range(1, 5))
    return {"size": int(size), "alpha": alpha, "beta": beta, "bias": bias}


def extract_glow_kernel(text: str) -> int | None:
    """Kernel size: extent shared by the first two adjacent identical loops."""
    ext = loop_extents(text)
    for a, b in zip(ext, ext[1:]):
        if a == b:
            return a
    return None


def extract_glow_channel(text: str) -> int | None:
    """Channel: extent of the loop following the two identical kernel loops."""
    ext = loop_extents(text)
    for i in range(len(ext) - 2):
        if ext[i] == ext[i + 1]:
            return ext[i + 2]
    return None


def is_pool_scale(text: str) -> float | None:
    """Bare multiply by a sub-1 constant (split-avgpool second stage)."""
    f = extract_features(text)
    if f.scalar_scale is not None and not f.load_acc and not f.mac:
        return f.scalar_scale
    return None


def is_sum_normalize(text: str) -> bool:
    """Sum then divide, no expf (split-softmax second stage)."""
    f = extract_features(text)
    return f.inplace_div and not f.has_expf
