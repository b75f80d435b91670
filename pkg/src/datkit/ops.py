"""Neural-network operators with hand-written adjoints."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from datkit.errors import DimensionError, ParameterError
from datkit.tensor import Tensor, as_tensor, make

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    if x.shape[axis] < 1:
        raise DimensionError(f"softmax over empty axis of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make(y, (x,), bw, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, -1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return make(y, (x,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [B, K]."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, -1)
    picked = lp[np.arange(len(labels)), labels]
    return picked.mean() * -1.0


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance, then scale and shift."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {n}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return make(y, (x, gamma, beta), bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the normal CDF written through erf."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make(y.astype(x.dtype, copy=False), (x,), bw, "gelu")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation on NCHW input with zero padding.

    ``w`` has shape [Cout, Cin/groups, kh, kw].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    B, cin, H, W = x.shape
    cout, cin_g, kh, kw = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ParameterError(f"channels {cin}->{cout} not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise DimensionError(f"weight {w.shape} expects {cin_g * groups} input channels, got {cin}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"bad stride={stride} / padding={padding}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    G, co_g = groups, cout // groups

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xg = xp.reshape(B, G, cin_g, Hp, Wp)
    cols = sliding_window_view(xg, (kh, kw), axis=(3, 4))[:, :, :, ::stride, ::stride]
    cols = cols[:, :, :, :Ho, :Wo]  # B G c Ho Wo kh kw
    wg = w.data.reshape(G, co_g, cin_g, kh, kw)
    out = np.einsum("bgchwij,gocij->bgohw", cols, wg, optimize=True)
    out = out.reshape(B, cout, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def bw(g):
        gg = g.reshape(B, G, co_g, Ho, Wo)
        dw = np.einsum("bgohw,bgchwij->gocij", gg, cols, optimize=True).reshape(w.shape)
        dcols = np.einsum("bgohw,gocij->bgchwij", gg, wg, optimize=True)
        dxp = np.zeros((B, G, cin_g, Hp, Wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j]
        dx = dxp.reshape(B, cin, Hp, Wp)
        if padding:
            dx = dx[:, :, padding:padding + H, padding:padding + W]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return make(out.astype(x.dtype, copy=False), parents, bw, "conv2d")


def _denormalize(coord: np.ndarray, size: int) -> tuple[np.ndarray, float]:
    """Corner-aligned map from [-1, 1] to pixel index; returns (pixel, d pixel / d coord).

    A length-1 axis keeps the unit scale of a length-2 axis so offsets stay finite.
    Values within a few ulps of an integer are snapped so lattice points hit pixels exactly.
    """
    half = max(size - 1, 1) / 2.0
    px = coord * half + (size - 1) / 2.0
    near = np.rint(px)
    tol = 16 * np.finfo(px.dtype).eps * max(size, 1)
    px = np.where(np.abs(px - near) <= tol, near, px)
    return px, half


def bilinear_sample(z: Tensor, pts: Tensor) -> Tensor:
    """Sample ``z`` at normalized ``(y, x)`` points with hat-function weights.

    Shapes: ``z`` [H, W, C] with ``pts`` [P, 2], or batched ``z`` [B, H, W, C]
    with ``pts`` [B, P, 2].  ``(-1, -1)`` is the centre of the top-left pixel and
    ``(+1, +1)`` the centre of the bottom-right one.  Locations outside the map
    contribute zero, so points farther than one pixel outside return zeros.
    Adjoints flow to both ``z`` and ``pts``.
    """
    z, pts = as_tensor(z), as_tensor(pts)
    batched = z.ndim == 4
    if not batched:
        if z.ndim != 3 or pts.ndim != 2:
            raise DimensionError(f"bilinear_sample expects [H,W,C] and [P,2], got {z.shape}, {pts.shape}")
        zd, pd = z.data[None], pts.data[None]
    else:
        if pts.ndim != 3 or pts.shape[0] != z.shape[0]:
            raise DimensionError(f"bilinear_sample batch mismatch: {z.shape} vs {pts.shape}")
        zd, pd = z.data, pts.data
    if pd.shape[-1] != 2:
        raise DimensionError(f"points must have a trailing extent of 2, got {pts.shape}")
    B, H, W, C = zd.shape
    P = pd.shape[1]

    py, sy = _denormalize(pd[..., 0], H)
    px, sx = _denormalize(pd[..., 1], W)
    y0 = np.floor(py)
    x0 = np.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)

    flat = zd.reshape(B * H * W, C)
    bidx = np.arange(B)[:, None] * (H * W)
    corners = []
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            yi, xi = y0 + dy, x0 + dx
            valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            idx = bidx + np.clip(yi, 0, H - 1) * W + np.clip(xi, 0, W - 1)
            vals = flat[idx] * valid[..., None]
            corners.append((dy, dx, wy, wx, valid, idx, vals))

    out = np.zeros((B, P, C), dtype=zd.dtype)
    for _, _, wy, wx, _, _, vals in corners:
        out += (wy * wx)[..., None] * vals

    def bw(g):
        g3 = g if batched else g[None]
        gz = np.zeros_like(flat)
        gy = np.zeros((B, P), dtype=zd.dtype)
        gx = np.zeros((B, P), dtype=zd.dtype)
        for dy, dx, wy, wx, valid, idx, vals in corners:
            w = (wy * wx * valid)[..., None]
            np.add.at(gz, idx.reshape(-1), (g3 * w).reshape(-1, C))
            dot = (g3 * vals).sum(axis=-1)
            gy += dot * wx * (1.0 if dy else -1.0)
            gx += dot * wy * (1.0 if dx else -1.0)
        gp = np.stack([gy * sy, gx * sx], axis=-1)
        gz = gz.reshape(zd.shape)
        if not batched:
            gz, gp = gz[0], gp[0]
        return gz, gp

    res = out if batched else out[0]
    return make(res, (z, pts), bw, "bilinear_sample")


def bilinear_weights(pt, H: int, W: int) -> dict[tuple[int, int], float]:
    """Non-zero hat weights of one normalized point, keyed by in-range (row, col)."""
    arr = np.asarray(pt, dtype=np.float64)
    py, _ = _denormalize(arr[0:1], H)
    px, _ = _denormalize(arr[1:2], W)
    out = {}
    for r in range(int(np.floor(py[0])), int(np.floor(py[0])) + 2):
        for c in range(int(np.floor(px[0])), int(np.floor(px[0])) + 2):
            w = max(0.0, 1.0 - abs(py[0] - r)) * max(0.0, 1.0 - abs(px[0] - c))
            if 0 <= r < H and 0 <= c < W and w > 0:
                out[(r, c)] = w
    return out
