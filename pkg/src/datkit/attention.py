"""Dense, window and spatial-reduction attention plus the pre-norm transformer block."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from datkit import tensor as T
from datkit.errors import ConfigError, DimensionError, ParameterError
from datkit.ops import conv2d, gelu, layer_norm, softmax
from datkit.tensor import Tensor

# Additive logit for masked pairs; exp() underflows to exactly 0 in f32 and f64.
MASK_VALUE = -1e9


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def param(arr: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(arr), requires_grad=True)


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor | None

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, bias: bool = True, dtype=np.float32) -> Linear:
        w = param(trunc_normal(rng, (n_in, n_out), dtype=dtype))
        b = param(np.zeros(n_out, dtype=dtype)) if bias else None
        return cls(w, b)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


@dataclass
class LayerNormParams:
    weight: Tensor
    bias: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, dim: int, dtype=np.float32) -> LayerNormParams:
        return cls(param(np.ones(dim, dtype=dtype)), param(np.zeros(dim, dtype=dtype)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


@dataclass
class MhsaParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    heads: int

    def __post_init__(self):
        c = self.channels
        for name in ("q", "k", "v", "o"):
            if getattr(self, name).weight.shape != (c, c):
                raise ConfigError(f"projection {name} must be {c}x{c}")
        if c % self.heads:
            raise ConfigError(f"channels {c} not divisible by heads {self.heads}")

    @property
    def channels(self) -> int:
        return self.q.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @classmethod
    def init(cls, rng, channels: int, heads: int, bias: bool = True, dtype=np.float32) -> MhsaParams:
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        lin = [Linear.init(rng, channels, channels, bias, dtype) for _ in range(4)]
        return cls(*lin, heads=heads)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., N, C] -> [..., M, N, C/M]."""
    *lead, n, c = x.shape
    x = x.reshape(*lead, n, heads, c // heads)
    nd = len(lead)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2)


def merge_heads(x: Tensor) -> Tensor:
    """[..., M, N, d] -> [..., N, M*d]."""
    *lead, m, n, d = x.shape
    nd = len(lead)
    x = x.transpose(*range(nd), nd + 1, nd, nd + 2)
    return x.reshape(*lead, n, m * d)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                     bias: Tensor | np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Multi-head attention on projected tokens; returns (merged output, attention weights).

    ``q`` is [..., Nq, C]; ``k`` and ``v`` are [..., Nk, C]; ``bias`` broadcasts
    against the [..., M, Nq, Nk] logits.
    """
    d = q.shape[-1] // heads
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    logits = (qh @ kh.transpose(*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2)) * (1.0 / math.sqrt(d))
    if bias is not None:
        logits = logits + bias
    attn = softmax(logits, -1)
    return merge_heads(attn @ vh), attn


def mhsa(x: Tensor, p: MhsaParams, bias: Tensor | None = None) -> Tensor:
    """Multi-head self-attention over the token axis of ``x`` [..., N, C]."""
    if x.shape[-1] != p.channels:
        raise DimensionError(f"input channels {x.shape[-1]} != projection size {p.channels}")
    n = x.shape[-2]
    if bias is not None and tuple(bias.shape[-3:]) != (p.heads, n, n):
        raise DimensionError(f"bias shape {bias.shape} must end in {(p.heads, n, n)}")
    z, _ = scaled_attention(p.q(x), p.k(x), p.v(x), p.heads, bias)
    return p.o(z)


# -- window attention ---------------------------------------------------------

def relative_position_index(w: int) -> np.ndarray:
    """[w*w, w*w] row indices into a (2w-1)^2 bias table, Swin layout."""
    ys, xs = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])  # 2, N
    rel = coords[:, :, None] - coords[:, None, :]
    return ((rel[0] + w - 1) * (2 * w - 1) + (rel[1] + w - 1)).astype(np.int64)


def shift_window_mask(H: int, W: int, w: int, shift: int) -> np.ndarray:
    """[nW, w*w, w*w] additive mask that blocks pairs split by the cyclic shift."""
    img = np.zeros((H, W), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, H - w), slice(H - w, H - shift), slice(H - shift, H)):
        for ws in (slice(0, W - w), slice(W - w, W - shift), slice(W - shift, W)):
            img[hs, ws] = cnt
            cnt += 1
    win = img.reshape(H // w, w, W // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    diff = win[:, None, :] != win[:, :, None]
    return np.where(diff, MASK_VALUE, 0.0)


def effective_window(H: int, W: int, window: int, shift: int) -> tuple[int, int]:
    """Swin rule: a map no larger than the window is one window and is never shifted."""
    if min(H, W) <= window:
        return min(H, W), 0
    return window, shift


@dataclass
class WindowAttnParams:
    attn: MhsaParams
    window: int
    shift: int
    bias_table: Tensor  # [(2w-1)^2, M]
    relative_index: np.ndarray  # [w^2, w^2]

    def __post_init__(self):
        w = self.window
        if self.shift not in (0, w // 2):
            raise ConfigError(f"shift {self.shift} must be 0 or {w // 2} for window {w}")
        if self.bias_table.shape != ((2 * w - 1) ** 2, self.attn.heads):
            raise ConfigError(f"bias table shape {self.bias_table.shape} wrong for window {w}")
        if self.relative_index.max() >= (2 * w - 1) ** 2:
            raise ConfigError("relative index exceeds table")

    @classmethod
    def init(cls, rng, channels: int, heads: int, window: int, shift: int = 0,
             dtype=np.float32) -> WindowAttnParams:
        attn = MhsaParams.init(rng, channels, heads, dtype=dtype)
        table = param(trunc_normal(rng, ((2 * window - 1) ** 2, heads), dtype=dtype))
        return cls(attn, window, shift, table, relative_position_index(window))


def window_partition(x: Tensor, w: int) -> Tensor:
    """[B, H, W, C] -> [B, nW, w*w, C]."""
    B, H, W, C = x.shape
    x = x.reshape(B, H // w, w, W // w, w, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // w) * (W // w), w * w, C)


def window_reverse(x: Tensor, w: int, H: int, W: int) -> Tensor:
    B, _, _, C = x.shape
    x = x.reshape(B, H // w, W // w, w, w, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [H,W,C] or [B,H,W,C], got {x.shape}")
    return x, False


def window_attention(x: Tensor, p: WindowAttnParams) -> Tensor:
    """Local attention inside non-overlapping windows, optionally cyclically shifted."""
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    w, s = p.window, p.shift
    if H % w or W % w:
        raise ConfigError(f"window size {w} does not divide feature map {H}x{W}")
    n = w * w
    rel = p.bias_table[p.relative_index.reshape(-1)].reshape(n, n, p.attn.heads)
    bias = rel.transpose(2, 0, 1)  # M N N
    if s:
        x = T.roll(x, (-s, -s), (1, 2))
        mask = shift_window_mask(H, W, w, s).astype(x.dtype)  # nW N N
        bias = bias.reshape(1, *bias.shape) + mask[:, None]
    win = window_partition(x, w)
    out = mhsa(win, p.attn, bias)
    out = window_reverse(out, w, H, W)
    if s:
        out = T.roll(out, (s, s), (1, 2))
    return out[0] if squeeze else out


# -- spatial-reduction attention -------------------------------------------------

@dataclass
class SraParams:
    attn: MhsaParams
    reduction: int
    sr_weight: Tensor | None = None  # [C, C, R, R]
    sr_bias: Tensor | None = None
    sr_norm: LayerNormParams | None = None

    @classmethod
    def init(cls, rng, channels: int, heads: int, reduction: int, dtype=np.float32) -> SraParams:
        attn = MhsaParams.init(rng, channels, heads, dtype=dtype)
        if reduction == 1:
            return cls(attn, 1)
        w = param(trunc_normal(rng, (channels, channels, reduction, reduction), dtype=dtype))
        b = param(np.zeros(channels, dtype=dtype))
        return cls(attn, reduction, w, b, LayerNormParams.init(channels, dtype))


def sra_attention(x: Tensor, p: SraParams) -> Tensor:
    """Full-resolution queries against keys/values from a strided R x R linear merge."""
    x, squeeze = _batched(x)
    B, H, W, C = x.shape
    R = p.reduction
    if R < 1 or H % R or W % R:
        raise ConfigError(f"reduction {R} does not divide feature map {H}x{W}")
    tokens = x.reshape(B, H * W, C)
    if R == 1:
        kv = tokens
    else:
        red = conv2d(x.transpose(0, 3, 1, 2), p.sr_weight, p.sr_bias, stride=R)
        kv = p.sr_norm(red.transpose(0, 2, 3, 1).reshape(B, (H // R) * (W // R), C))
    a = p.attn
    z, _ = scaled_attention(a.q(tokens), a.k(kv), a.v(kv), a.heads)
    out = a.o(z).reshape(B, H, W, C)
    return out[0] if squeeze else out


# -- block ----------------------------------------------------------------------

@dataclass
class MlpParams:
    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, rng, channels: int, ratio: int = 4, dtype=np.float32) -> MlpParams:
        hidden = channels * ratio
        return cls(Linear.init(rng, channels, hidden, dtype=dtype),
                   Linear.init(rng, hidden, channels, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


@dataclass
class BlockParams:
    norm1: LayerNormParams
    attn: Any  # WindowAttnParams | SraParams | DmhaParams
    norm2: LayerNormParams
    mlp: MlpParams
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ParameterError(f"drop_path_rate {self.drop_path_rate} outside [0, 1)")


def stochastic_depth(branch: Tensor, rate: float, training: bool,
                     rng: np.random.Generator | None) -> Tensor:
    """Drop the whole residual branch per sample with probability ``rate``.

    Kept branches are divided by ``1 - rate`` so inference is the identity.
    The leading axis is the sample axis when ``branch`` has four dimensions.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"stochastic depth rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return branch
    if rng is None:
        raise ParameterError("training-mode stochastic depth needs an rng")
    n = branch.shape[0] if branch.ndim == 4 else 1
    keep = (rng.random(n) >= rate).astype(branch.dtype) / (1.0 - rate)
    shape = (n,) + (1,) * (branch.ndim - 1) if branch.ndim == 4 else (1,) * branch.ndim
    return branch * keep.reshape(shape)


def attend(x: Tensor, params, capture: list | None = None) -> Tensor:
    """Dispatch to the attention kind matching ``params``."""
    if isinstance(params, WindowAttnParams):
        return window_attention(x, params)
    if isinstance(params, SraParams):
        return sra_attention(x, params)
    from datkit.deform import DmhaParams, dmha_forward

    if isinstance(params, DmhaParams):
        return dmha_forward(x, params, capture=capture)
    raise TypeError(f"unknown attention parameters {type(params).__name__}")


def transformer_block(x: Tensor, b: BlockParams, training: bool = False,
                      rng: np.random.Generator | None = None,
                      capture: list | None = None) -> Tensor:
    """Pre-norm block: attention then MLP, each as a stochastically dropped residual."""
    x = x + stochastic_depth(attend(b.norm1(x), b.attn, capture), b.drop_path_rate, training, rng)
    return x + stochastic_depth(b.mlp(b.norm2(x)), b.drop_path_rate, training, rng)
