"""Deformable multi-head attention and the per-query sampling variant it is compared with.

Point coordinates are ``(y, x)`` pairs normalized per axis so that ``(-1, -1)``
is the top-left pixel centre and ``(+1, +1)`` the bottom-right one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from datkit import tensor as T
from datkit.attention import Linear, param, scaled_attention, trunc_normal
from datkit.errors import ConfigError, DimensionError
from datkit.ops import bilinear_sample, conv2d, gelu, softmax
from datkit.tensor import Tensor

BIAS_MODES = ("none", "fixed", "depthwise_conv", "deformable_relative")


@dataclass(frozen=True)
class DeformAttnConfig:
    channels: int
    heads: int
    groups: int
    grid_factor: int = 1
    offset_range: float = 2.0
    offset_kernel: int = 5
    bias_mode: str = "deformable_relative"
    use_offsets: bool = True
    qkv_bias: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.groups < 1 or self.heads % self.groups:
            raise ConfigError(f"heads {self.heads} must be a multiple of offset groups {self.groups}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.offset_kernel < 1 or self.offset_kernel % 2 == 0:
            raise ConfigError(f"offset kernel {self.offset_kernel} must be odd")
        if self.grid_factor < 1:
            raise ConfigError(f"grid factor {self.grid_factor} must be >= 1")
        if self.offset_range < 0:
            raise ConfigError(f"offset range {self.offset_range} must be >= 0")
        if self.bias_mode not in BIAS_MODES:
            raise ConfigError(f"bias mode {self.bias_mode!r} not in {BIAS_MODES}")

    def check_map(self, H: int, W: int) -> None:
        r = self.grid_factor
        if H % r or W % r:
            raise ConfigError(f"grid factor {r} does not divide feature map {H}x{W}")

    @property
    def group_channels(self) -> int:
        return self.channels // self.groups


@dataclass(frozen=True)
class ReferenceGrid:
    points: np.ndarray  # [H_G * W_G, 2]
    height: int
    width: int


def _lattice(n: int, dtype=np.float64) -> np.ndarray:
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return (np.arange(n, dtype=np.float64) * (2.0 / (n - 1)) - 1.0).astype(dtype)


def lattice_points(H: int, W: int, dtype=np.float64) -> np.ndarray:
    """Row-major normalized coordinates of every integer location of an H x W map."""
    ys, xs = np.meshgrid(_lattice(H, dtype), _lattice(W, dtype), indexing="ij")
    return np.stack([ys.ravel(), xs.ravel()], axis=-1)


def reference_grid(H: int, W: int, r: int, dtype=np.float64) -> ReferenceGrid:
    if r < 1 or H % r or W % r:
        raise ConfigError(f"grid factor {r} does not divide feature map {H}x{W}")
    hg, wg = H // r, W // r
    return ReferenceGrid(lattice_points(hg, wg, dtype), hg, wg)


def pixel_to_normalized(H: int, W: int) -> np.ndarray:
    """Per-axis factor turning a pixel displacement into a normalized one."""
    return np.array([2.0 / max(H - 1, 1), 2.0 / max(W - 1, 1)])


@dataclass
class OffsetNetParams:
    dw_weight: Tensor  # [C/G, 1, k, k]
    dw_bias: Tensor  # [C/G]
    pw_weight: Tensor  # [2, C/G, 1, 1]; no bias

    @classmethod
    def init(cls, rng, group_channels: int, k: int, dtype=np.float32) -> OffsetNetParams:
        # Fan-in uniform init, as for ordinary conv layers; the 0.02 transformer init
        # leaves the offsets stuck near zero for hundreds of steps.
        def uniform(shape, fan_in):
            b = 1.0 / math.sqrt(fan_in)
            return param(rng.uniform(-b, b, size=shape).astype(dtype))

        return cls(uniform((group_channels, 1, k, k), k * k),
                   uniform((group_channels,), k * k),
                   uniform((2, group_channels, 1, 1), group_channels))


@dataclass
class DmhaParams:
    config: DeformAttnConfig
    height: int
    width: int
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    offset: OffsetNetParams | None
    reference: np.ndarray  # buffer [N_s, 2]
    bias_table: Tensor | None = None  # [M, 2H-1, 2W-1]
    fixed_bias: Tensor | None = None  # [M, HW, N_s]
    dwc_weight: Tensor | None = None  # [C, 1, 3, 3]
    dwc_bias: Tensor | None = None

    @property
    def grid(self) -> ReferenceGrid:
        r = self.config.grid_factor
        return ReferenceGrid(self.reference, self.height // r, self.width // r)

    @classmethod
    def init(cls, rng, cfg: DeformAttnConfig, H: int, W: int, dtype=np.float32) -> DmhaParams:
        cfg.check_map(H, W)
        C, M = cfg.channels, cfg.heads
        lin = [Linear.init(rng, C, C, bias=cfg.qkv_bias, dtype=dtype) for _ in range(3)]
        o = Linear.init(rng, C, C, dtype=dtype)
        offset = OffsetNetParams.init(rng, cfg.group_channels, cfg.offset_kernel, dtype) \
            if cfg.use_offsets else None
        grid = reference_grid(H, W, cfg.grid_factor, dtype)
        p = cls(cfg, H, W, *lin, o, offset, grid.points)
        ns = grid.height * grid.width
        if cfg.bias_mode == "deformable_relative":
            p.bias_table = param(trunc_normal(rng, (M, 2 * H - 1, 2 * W - 1), dtype=dtype))
        elif cfg.bias_mode == "fixed":
            p.fixed_bias = param(trunc_normal(rng, (M, H * W, ns), dtype=dtype))
        elif cfg.bias_mode == "depthwise_conv":
            p.dwc_weight = param(trunc_normal(rng, (C, 1, 3, 3), dtype=dtype))
            p.dwc_bias = param(np.zeros(C, dtype=dtype))
        return p


def _to_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected [H,W,C] or [B,H,W,C], got {x.shape}")
    return x, False


def generate_offsets(q: Tensor, p: DmhaParams) -> Tensor:
    """Offsets [B, G, N_s, 2] (normalized units) predicted from the query map.

    Each group's channel slice goes through the same depthwise k x k conv (stride r),
    GELU and bias-free 1 x 1 conv; the result is bounded by ``s * tanh`` in input
    pixels and converted to normalized units.
    """
    q, squeeze = _to_batched(q)
    cfg = p.config
    B, H, W, C = q.shape
    cfg.check_map(H, W)
    G, cg, r, k = cfg.groups, cfg.group_channels, cfg.grid_factor, cfg.offset_kernel
    hg, wg = H // r, W // r
    if p.offset is None:
        raise ConfigError("offset network disabled for this layer")
    qg = q.reshape(B, H, W, G, cg).transpose(0, 3, 4, 1, 2).reshape(B * G, cg, H, W)
    h = conv2d(qg, p.offset.dw_weight, p.offset.dw_bias, stride=r, padding=k // 2, groups=cg)
    if h.shape[2:] != (hg, wg):
        raise ConfigError(f"offset net output {h.shape[2:]} != grid {hg}x{wg}")
    raw = conv2d(gelu(h), p.offset.pw_weight)  # B*G, 2, hg, wg
    px = T.tanh(raw) * float(cfg.offset_range)
    px = px.transpose(0, 2, 3, 1).reshape(B, G, hg * wg, 2)
    out = px * pixel_to_normalized(H, W).astype(q.dtype)
    return out[0] if squeeze else out


def sample_groups(x: Tensor, pos: Tensor) -> Tensor:
    """Sample channel group g of ``x`` [B,H,W,C] at ``pos`` [B,G,N,2]; returns [B,N,C]."""
    B, H, W, C = x.shape
    G, n = pos.shape[1], pos.shape[2]
    cg = C // G
    xg = x.reshape(B, H, W, G, cg).transpose(0, 3, 1, 2, 4).reshape(B * G, H, W, cg)
    s = bilinear_sample(xg, pos.reshape(B * G, n, 2))  # B*G, N, cg
    return s.reshape(B, G, n, cg).transpose(0, 2, 1, 3).reshape(B, n, C)


def deformable_sample(x: Tensor, grid: ReferenceGrid, offsets: Tensor) -> Tensor:
    """Bilinear features at ``grid + offsets`` per channel group, channels in original order."""
    x, squeeze = _to_batched(x)
    offsets = T.as_tensor(offsets, dtype=x.dtype)
    if offsets.ndim == 3:
        offsets = offsets.reshape(1, *offsets.shape)
    G = offsets.shape[1]
    if x.shape[-1] % G:
        raise DimensionError(f"{x.shape[-1]} channels cannot split into {G} groups")
    pos = offsets + grid.points.astype(x.dtype)
    out = sample_groups(x, pos)
    return out[0] if squeeze else out


def deformable_relative_bias(table: Tensor, query_positions, deformed_points) -> Tensor:
    """Continuous relative position bias [.., M, HW, N_s] interpolated from ``table``.

    ``table`` is [M, 2H-1, 2W-1].  ``deformed_points`` is [N_s, 2] (shared by every
    head) or [B, G, N_s, 2] with the heads split evenly across the G groups.
    Displacements are halved into [-1, 1] and clamped there before lookup.
    """
    table = T.as_tensor(table)
    qpos = T.as_tensor(query_positions, dtype=table.dtype)
    pts = T.as_tensor(deformed_points, dtype=table.dtype)
    squeeze = pts.ndim == 2
    if squeeze:
        pts = pts.reshape(1, 1, *pts.shape)
    B, G, ns, _ = pts.shape
    M, th, tw = table.shape
    if M % G:
        raise DimensionError(f"{M} bias heads cannot split into {G} groups")
    nq = qpos.shape[0]
    disp = (qpos.reshape(1, 1, nq, 1, 2) - pts.reshape(B, G, 1, ns, 2)) * 0.5
    disp = T.clip(disp, -1.0, 1.0)
    mg = M // G
    tg = table.reshape(G, mg, th, tw).transpose(0, 2, 3, 1)  # G th tw mg
    tb = tg[np.tile(np.arange(G), B)]  # B*G th tw mg
    vals = bilinear_sample(tb, disp.reshape(B * G, nq * ns, 2))  # B*G, nq*ns, mg
    out = vals.reshape(B, G, nq, ns, mg).transpose(0, 1, 4, 2, 3).reshape(B, M, nq, ns)
    return out[0] if squeeze else out


def dmha_forward(x: Tensor, p: DmhaParams, capture: list | None = None) -> Tensor:
    """Deformable multi-head attention on a feature map [B, H, W, C] (or [H, W, C]).

    When ``capture`` is a list, a record with the deformed points, offsets and
    attention weights of this call is appended to it.
    """
    x, squeeze = _to_batched(x)
    cfg = p.config
    B, H, W, C = x.shape
    if (H, W) != (p.height, p.width) or C != cfg.channels:
        raise DimensionError(f"layer built for {p.height}x{p.width}x{cfg.channels}, got {x.shape[1:]}")
    grid = p.grid
    ns = grid.height * grid.width
    q = p.q(x)
    if cfg.use_offsets:
        offsets = generate_offsets(q, p)
    else:
        offsets = Tensor(np.zeros((B, cfg.groups, ns, 2), dtype=x.dtype))
    pos = offsets + grid.points.astype(x.dtype)
    xs = sample_groups(x, pos)
    k, v = p.k(xs), p.v(xs)

    bias = None
    if cfg.bias_mode == "deformable_relative":
        bias = deformable_relative_bias(p.bias_table, lattice_points(H, W, x.dtype), pos)
    elif cfg.bias_mode == "fixed":
        bias = p.fixed_bias
    z, attn = scaled_attention(q.reshape(B, H * W, C), k, v, cfg.heads, bias)
    if cfg.bias_mode == "depthwise_conv":
        pe = conv2d(q.transpose(0, 3, 1, 2), p.dwc_weight, p.dwc_bias, padding=1, groups=C)
        z = z + pe.transpose(0, 2, 3, 1).reshape(B, H * W, C)
    out = p.o(z).reshape(B, H, W, C)
    if capture is not None:
        capture.append({
            "kind": "deformable",
            "feature_size": (H, W),
            "points": pos.data.copy(),
            "offsets": offsets.data.copy(),
            "offsets_px": offsets.data / pixel_to_normalized(H, W),
            "attention": attn.data.copy(),
            "offset_range": cfg.offset_range,
        })
    return out[0] if squeeze else out


# -- per-query sampling attention ----------------------------------------------------

@dataclass
class DdetrParams:
    heads: int
    points: int
    v: Linear
    o: Linear
    offset: Linear  # [C, M*K*2], pixel units
    att: Linear  # [C, M*K]

    @property
    def channels(self) -> int:
        return self.v.weight.shape[0]

    @classmethod
    def init(cls, rng, channels: int, heads: int, points: int, dtype=np.float32) -> DdetrParams:
        if channels % heads:
            raise ConfigError(f"channels {channels} not divisible by heads {heads}")
        if points < 1:
            raise ConfigError(f"need at least one sampling point, got {points}")
        v = Linear.init(rng, channels, channels, dtype=dtype)
        o = Linear.init(rng, channels, channels, dtype=dtype)
        off = Linear(param(np.zeros((channels, heads * points * 2), dtype=dtype)),
                     param(_ring_init(heads, points).astype(dtype)))
        att = Linear(param(np.zeros((channels, heads * points), dtype=dtype)),
                     param(np.zeros(heads * points, dtype=dtype)))
        return cls(heads, points, v, o, off, att)


def _ring_init(heads: int, points: int) -> np.ndarray:
    """One direction per head, k-th point at distance k+1 (max-norm) pixels."""
    theta = np.arange(heads) * (2.0 * math.pi / heads)
    d = np.stack([np.sin(theta), np.cos(theta)], -1)
    d = d / np.abs(d).max(-1, keepdims=True)
    ring = d[:, None, :] * np.arange(1, points + 1)[None, :, None]
    return ring.reshape(-1)


def ddetr_attention(x: Tensor, p: DdetrParams, K: int | None = None,
                    capture: list | None = None) -> Tensor:
    """Each query samples K points around itself and mixes them with predicted weights.

    Weights come from a linear map of the query feature followed by a softmax
    over the K points; no query-key dot products are formed.
    """
    x, squeeze = _to_batched(x)
    M = p.heads
    K = p.points if K is None else K
    if K != p.points:
        raise ConfigError(f"parameters built for K={p.points}, asked for K={K}")
    B, H, W, C = x.shape
    d = C // M
    hw = H * W
    tokens = x.reshape(B, hw, C)
    off = p.offset(tokens).reshape(B, hw, M, K, 2) * pixel_to_normalized(H, W).astype(x.dtype)
    pts = off + lattice_points(H, W, x.dtype).reshape(1, hw, 1, 1, 2)
    pts = pts.transpose(0, 2, 1, 3, 4).reshape(B * M, hw * K, 2)
    v0 = T.matmul(x, p.v.weight).reshape(B, H, W, M, d).transpose(0, 3, 1, 2, 4)
    sampled = bilinear_sample(v0.reshape(B * M, H, W, d), pts).reshape(B, M, hw, K, d)
    A = softmax(p.att(tokens).reshape(B, hw, M, K), -1).transpose(0, 2, 1, 3)  # B M hw K
    z = (sampled * A.reshape(B, M, hw, K, 1)).sum(axis=3)  # B M hw d
    z = z.transpose(0, 2, 1, 3).reshape(B, hw, C)
    if p.v.bias is not None:
        z = z + p.v.bias
    out = p.o(z).reshape(B, H, W, C)
    if capture is not None:
        capture.append({"kind": "ddetr", "attention": A.data.copy(),
                        "points": pts.data.reshape(B, M, hw, K, 2).copy()})
    return out[0] if squeeze else out
