"""Named float64 gradient checks covering every differentiable operation and layer."""

from __future__ import annotations

from typing import Callable

import numpy as np

from datkit import tensor as T
from datkit.attention import (
    BlockParams,
    LayerNormParams,
    MlpParams,
    SraParams,
    WindowAttnParams,
    sra_attention,
    transformer_block,
    window_attention,
)
from datkit.deform import DdetrParams, DeformAttnConfig, DmhaParams, ddetr_attention, dmha_forward
from datkit.gradcheck import grad_check
from datkit.ops import bilinear_sample, conv2d, cross_entropy, gelu, layer_norm, log_softmax, softmax
from datkit.tensor import Tensor

F64 = np.float64
DEFAULT_TOL = 1e-4


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=F64), requires_grad=True)


def _op(fn, *shapes, lo=-0.9, hi=0.9):
    def run(rng):
        return grad_check(fn, [_leaf(rng.uniform(lo, hi, size=s)) for s in shapes])
    return run


def _perturb_offsets(rng, p):
    # Generic offsets keep sampled points away from the lattice, where bilinear
    # interpolation has kinks that finite differences cannot resolve.
    p.offset.dw_weight.data[...] = rng.normal(size=p.offset.dw_weight.shape) * 0.3
    p.offset.pw_weight.data[...] = rng.normal(size=p.offset.pw_weight.shape)


def _dmha(rng, mode="deformable_relative", G=1):
    p = DmhaParams.init(rng, DeformAttnConfig(8, 2, G, bias_mode=mode), 4, 4, dtype=F64)
    _perturb_offsets(rng, p)
    x = _leaf(rng.normal(size=(4, 4, 8)))
    ins = [x, p.q.weight, p.q.bias, p.k.weight, p.k.bias, p.v.weight, p.o.weight, p.o.bias,
           p.offset.dw_weight, p.offset.dw_bias, p.offset.pw_weight]
    ins += [t for t in (p.bias_table, p.fixed_bias, p.dwc_weight, p.dwc_bias) if t is not None]
    return grad_check(lambda x, *_: dmha_forward(x, p), ins)


def _window(rng, shift):
    p = WindowAttnParams.init(rng, 4, 2, window=2, shift=shift, dtype=F64)
    x = _leaf(rng.normal(size=(4, 4, 4)))
    a = p.attn
    ins = [x, p.bias_table, a.q.weight, a.k.weight, a.v.weight, a.v.bias, a.o.weight]
    return grad_check(lambda x, *_: window_attention(x, p), ins)


def _sra(rng):
    p = SraParams.init(rng, 4, 2, reduction=2, dtype=F64)
    x = _leaf(rng.normal(size=(4, 4, 4)))
    ins = [x, p.sr_weight, p.sr_bias, p.sr_norm.weight, p.attn.q.weight, p.attn.k.weight]
    return grad_check(lambda x, *_: sra_attention(x, p), ins)


def _block(rng):
    b = BlockParams(LayerNormParams.init(4, F64), WindowAttnParams.init(rng, 4, 2, 2, 1, F64),
                    LayerNormParams.init(4, F64), MlpParams.init(rng, 4, 2, F64))
    x = _leaf(rng.normal(size=(1, 4, 4, 4)))
    ins = [x, b.norm1.weight, b.attn.bias_table, b.attn.attn.k.weight, b.mlp.fc1.weight,
           b.mlp.fc2.bias, b.norm2.bias]
    return grad_check(lambda x, *_: transformer_block(x, b), ins)


def _ddetr(rng):
    p = DdetrParams.init(rng, 4, 2, 2, dtype=F64)
    p.offset.weight.data[...] = rng.normal(size=p.offset.weight.shape) * 0.3
    p.att.weight.data[...] = rng.normal(size=p.att.weight.shape)
    x = _leaf(rng.normal(size=(3, 3, 4)))
    ins = [x, p.offset.weight, p.offset.bias, p.att.weight, p.v.weight, p.v.bias, p.o.bias]
    return grad_check(lambda x, *_: ddetr_attention(x, p), ins)


def _micro(rng, coords_per_tensor=3):
    from datkit.model import build_dat, deformable_layers, forward_classify, preset, trainable_parameters

    m = build_dat(preset("micro"), rng, dtype=F64)
    m.head.weight.data[...] = rng.normal(size=m.head.weight.shape)
    for layer in deformable_layers(m):
        _perturb_offsets(rng, layer)
    x = rng.normal(size=(2, 3, 32, 32))
    labels = np.array([0, 3])
    params = [t for _, t in trainable_parameters(m)]
    return grad_check(lambda *_: cross_entropy(forward_classify(m, x), labels), params,
                      eps=1e-6, seed=1, max_coords=coords_per_tensor)


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "add": _op(lambda a, b: a + b, (3, 4), (4,)),
    "sub": _op(lambda a, b: a - b, (3, 1), (3, 4)),
    "mul": _op(lambda a, b: a * b, (3, 4), (3, 4)),
    "div": _op(lambda a, b: a / (b + 2.0), (3, 4), (3, 4)),
    "exp": _op(T.exp, (3, 4)),
    "log": _op(T.log, (3, 4), lo=0.5, hi=2.0),
    "tanh": _op(T.tanh, (3, 4)),
    "clip": _op(lambda x: T.clip(x, -0.95, 0.95) * 1.0, (3, 4), lo=-0.8, hi=0.8),
    "matmul": _op(lambda a, b: a @ b, (2, 3, 4), (4, 5)),
    "linear": _op(T.linear, (3, 4), (4, 2), (2,)),
    "reshape_transpose": _op(lambda a: a.reshape(2, 6).transpose(1, 0) * 1.5, (3, 4)),
    "sum_mean": _op(lambda a: a.sum(axis=0) * a.mean(axis=1, keepdims=True), (3, 4)),
    "getitem": _op(lambda a: a[np.array([0, 2, 2, 1])] * 2.0, (3, 2)),
    "concat_roll": _op(lambda a, b: T.concat([T.roll(a, 1, 0), b], axis=1), (3, 2), (3, 3)),
    "softmax": _op(lambda x: softmax(x, -1), (3, 5)),
    "log_softmax": _op(log_softmax, (3, 5)),
    "cross_entropy": _op(lambda z: cross_entropy(z, np.array([1, 0, 2])), (3, 4)),
    "layer_norm": _op(layer_norm, (3, 4), (4,), (4,)),
    "gelu": _op(gelu, (3, 4)),
    "conv2d": _op(lambda x, w, b: conv2d(x, w, b, stride=2, padding=1), (1, 2, 5, 5), (3, 2, 3, 3), (3,)),
    "conv2d_grouped": _op(lambda x, w: conv2d(x, w, stride=1, padding=1, groups=4),
                          (2, 4, 4, 4), (4, 1, 3, 3)),
    "bilinear_sample": _op(bilinear_sample, (3, 4, 2), (6, 2)),
    "window_attention": lambda rng: _window(rng, 0),
    "shifted_window_attention": lambda rng: _window(rng, 1),
    "sra_attention": _sra,
    "transformer_block": _block,
    "dmha": lambda rng: _dmha(rng, G=2),
    "dmha_fixed_bias": lambda rng: _dmha(rng, "fixed"),
    "dmha_depthwise_conv_bias": lambda rng: _dmha(rng, "depthwise_conv"),
    "ddetr_attention": _ddetr,
    "micro_model": _micro,
}


def run_battery(names=None, seed: int = 0) -> dict[str, float]:
    """Max relative error per named check."""
    names = list(CHECKS) if names is None else list(names)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks {unknown}; available: {sorted(CHECKS)}")
    return {n: CHECKS[n](np.random.default_rng([seed, i])) for i, n in enumerate(names)}
