"""Preset reference models for tests and the demo corpus.

Shapes are toy scale on purpose; coverage, not capacity, is the point:
plain chains, residual connections, concat with permuted inputs and channel
shuffles, every elementwise/reduction operator, layout-sensitive nets for
NCHWc and blocked kernels, and a GLOW-flavored net.
"""

from __future__ import annotations

from .simulator import CompileOptions, ModelBuilder, QuantSpec, RefModel


def mlp(seed=0) -> RefModel:
    b = ModelBuilder((1, 2, 6, 6), seed)
    h = b.flatten("@input")
    h = b.dense(h, 24)
    h = b.bias(h)
    h = b.relu(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def cnn_small(seed=1) -> RefModel:
    b = ModelBuilder((1, 3, 8, 8), seed)
    h = b.conv("@input", 8, 3, 1, 1)
    h = b.bias(h)
    h = b.relu(h)
    h = b.maxpool(h, 2, 2, 0)
    h = b.conv(h, 16, 3, 1, 1)
    h = b.bias(h)
    h = b.relu(h)
    h = b.avgpool(h, 4, 1, 0)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def residual(seed=2) -> RefModel:
    b = ModelBuilder((1, 4, 8, 8), seed)
    h = b.conv("@input", 8, 3, 1, 1)
    h = b.bias(h)
    skip = b.relu(h)
    h = b.conv(skip, 8, 3, 1, 1)
    h = b.bias(h)
    h = b.residual(h, skip)
    h = b.relu(h)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def concat_branches(seed=3) -> RefModel:
    b = ModelBuilder((1, 3, 8, 8), seed)
    a = b.conv("@input", 4, 3, 1, 1)
    a = b.bias(a)
    a = b.relu(a)
    c = b.conv("@input", 6, 1, 1, 0)
    c = b.bias(c)
    c = b.relu(c)
    h = b.concat([a, c])
    h = b.maxpool(h, 2, 2, 0)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def shuffle_net(seed=4) -> RefModel:
    b = ModelBuilder((1, 4, 8, 8), seed)
    a = b.conv("@input", 4, 3, 1, 1)
    a = b.bias(a)
    c = b.conv("@input", 4, 1, 1, 0)
    c = b.bias(c)
    h = b.concat([a, c])
    h = b.shuffle(h, 2)
    h = b.conv(h, 8, 1, 1, 0)
    h = b.bias(h)
    h = b.relu(h)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def split_branches(seed=5) -> RefModel:
    b = ModelBuilder((1, 8, 8, 8), seed)
    parts = b.split("@input", [4, 4])
    a = b.conv(parts[0], 4, 3, 1, 1)
    a = b.bias(a)
    c = b.conv(parts[1], 4, 3, 1, 1)
    c = b.bias(c)
    h = b.concat([a, c])
    h = b.relu(h)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def pool_zoo(seed=6) -> RefModel:
    b = ModelBuilder((1, 4, 14, 14), seed)
    h = b.conv("@input", 8, 3, 1, 1)
    h = b.bias(h)
    h = b.relu(h)
    h = b.maxpool(h, 3, 2, 1)
    h = b.avgpool(h, 7, 1, 0)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def elementwise_zoo(seed=7) -> RefModel:
    b = ModelBuilder((1, 4, 4, 4), seed)
    x = b.unary("abs", "@input")
    a = b.unary("sqrt", x)
    c = b.unary("exp", b.unary("neg", x))
    h = b.binary("add", a, c)
    h2 = b.binary("mul", a, c)
    h = b.binary("sub", h, h2)
    h = b.unary("abs", h)
    d = b.binary("div", h, c)
    p = b.binary("power", a, c)
    h = b.binary("add", d, p)
    h = b.clip(h, 0.0, 6.0)
    h = b.unary("rsqrt", b.binary("add", h, a))
    h = b.reduce("sum", h)
    h = b.flatten(h)
    h = b.dense(h, 8)
    b.softmax(h)
    return b.build()


def reduce_max_net(seed=8) -> RefModel:
    b = ModelBuilder((1, 4, 6, 6), seed)
    h = b.conv("@input", 8, 3, 1, 1)
    h = b.bias(h)
    h = b.relu(h)
    h = b.reduce("max", h)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def lrn_net(seed=9) -> RefModel:
    b = ModelBuilder((1, 3, 8, 8), seed)
    h = b.conv("@input", 8, 3, 1, 1)
    h = b.bias(h)
    h = b.relu(h)
    h = b.lrn(h, 5, 1e-4, 0.75, 1.0)
    h = b.maxpool(h, 2, 2, 0)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def layout_ops_net(seed=10) -> RefModel:
    b = ModelBuilder((1, 3, 6, 6), seed)
    h = b.pad("@input", 1, 1)
    h = b.conv(h, 4, 3, 1, 0)
    h = b.bias(h)
    h = b.relu(h)
    h = b.transpose(h, [0, 2, 1, 3])
    h = b.transpose(h, [0, 2, 1, 3])
    h = b.reshape(h, [1, 4, 36])
    h = b.expand_dim(h, 3)
    h = b.reshape(h, [1, 4, 6, 6])
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def deep_fused(seed=11) -> RefModel:
    """Conv stacks with bn-style mul/add chains and clip activations."""
    b = ModelBuilder((1, 3, 16, 16), seed)
    h = b.conv("@input", 8, 3, 2, 1)
    h = b.bias(h)
    h = b.scale(h)
    h = b.clip(h, 0.0, 6.0)
    h = b.conv(h, 16, 3, 1, 1)
    h = b.scale(h)
    h = b.bias(h)
    h = b.relu(h)
    h = b.maxpool(h, 2, 2, 0)
    h = b.flatten(h)
    h = b.dense(h, 12)
    h = b.bias(h)
    h = b.relu(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def reuse_chain(seed=12) -> RefModel:
    b = ModelBuilder((1, 4, 8, 8), seed)
    h = "@input"
    for _ in range(6):
        h = b.conv(h, 4, 3, 1, 1)
        h = b.bias(h)
        h = b.relu(h)
    h = b.flatten(h)
    h = b.dense(h, 10)
    b.softmax(h)
    return b.build()


def glow_net(seed=13) -> RefModel:
    b = ModelBuilder((1, 3, 8, 8), seed)
    h = b.conv("@input", 8, 3, 1, 1)
    h = b.bias(h)
    h = b.relu(h)
    h = b.maxpool(h, 2, 2, 0)
    c8 = b.conv(h, 16, 3, 1, 1)
    c8b = b.bias(c8)
    b.nodes[-2].attrs["c8"] = True
    h = b.avgpool(c8b, 4, 1, 0)
    h = b.flatten(h)
    h = b.dense(h, 10)
    h = b.bias(h)
    b.softmax(h)
    return b.build()


def dense_add_net(seed=15) -> RefModel:
    """Bias-carrying dense with no activation; split_dense_add target."""
    b = ModelBuilder((1, 2, 4, 4), seed)
    h = b.conv("@input", 4, 3, 1, 1)
    h = b.bias(h)
    h = b.relu(h)
    h = b.flatten(h)
    h = b.dense(h, 10)
    h = b.bias(h)
    b.softmax(h)
    return b.build()


def quant_cnn(seed=14) -> RefModel:
    """Four weighted layers; the quantized-recovery workhorse.

    The residual connection mixes differently-scaled paths, so per-layer
    scale confusion actually moves the decision boundary and substitute
    training has something to recover.
    """
    b = ModelBuilder((1, 3, 8, 8), seed)
    h = b.conv("@input", 8, 3, 1, 1)
    h = b.bias(h)
    skip = b.relu(h)
    h = b.conv(skip, 8, 3, 1, 1)
    h = b.bias(h)
    h = b.residual(h, skip)
    h = b.relu(h)
    h = b.maxpool(h, 2, 2, 0)
    h = b.flatten(h)
    h = b.dense(h, 32)
    h = b.bias(h)
    h = b.relu(h)
    h = b.dense(h, 16)
    h = b.bias(h)
    b.softmax(h)
    return b.build()


def roundtrip_corpus():
    """(name, model, options) triples for the round-trip identity suite."""
    return [
        ("mlp_O0", mlp(), CompileOptions(opt_level="O0", seed=100)),
        ("cnn_O0", cnn_small(), CompileOptions(opt_level="O0", seed=101)),
        ("cnn_O3", cnn_small(), CompileOptions(opt_level="O3", seed=102)),
        ("cnn_O3_blocked", cnn_small(),
         CompileOptions(opt_level="O3", nchwc_block=4, kernel_blocks=(4, 2), seed=103)),
        ("residual_O3", residual(), CompileOptions(opt_level="O3", seed=104)),
        ("concat_O3", concat_branches(), CompileOptions(opt_level="O3", seed=105)),
        ("shuffle_O3", shuffle_net(), CompileOptions(opt_level="O3", seed=106)),
        ("shuffle_O0", shuffle_net(), CompileOptions(opt_level="O0", seed=107)),
        ("split_O3", split_branches(), CompileOptions(opt_level="O3", seed=108)),
        ("pool_zoo_O0", pool_zoo(), CompileOptions(opt_level="O0", seed=109)),
        ("elementwise_O0", elementwise_zoo(), CompileOptions(opt_level="O0", seed=110)),
        ("reduce_max_O0", reduce_max_net(), CompileOptions(opt_level="O0", seed=111)),
        ("lrn_O0", lrn_net(), CompileOptions(opt_level="O0", seed=112)),
        ("layout_ops_O0", layout_ops_net(), CompileOptions(opt_level="O0", seed=113)),
        ("deep_fused_O3", deep_fused(),
         CompileOptions(opt_level="O3", nchwc_block=4, kernel_blocks=(4, 2), seed=114)),
        ("reuse_O3", reuse_chain(),
         CompileOptions(opt_level="O3", reuse_buffers=True, seed=115)),
        ("glow", glow_net(), CompileOptions(origin="glow", opt_level="O3", seed=116)),
    ]


def quant_options(mode: str, seed=200) -> CompileOptions:
    return CompileOptions(
        opt_level="O3",
        quantize=QuantSpec(mode=mode),
        seed=seed,
    )
