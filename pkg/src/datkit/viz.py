"""SVG overlays of deformed sampling points and per-key attention mass."""

from __future__ import annotations

import numpy as np

from datkit.errors import ConfigError, ParameterError
from datkit.harness import _points_to_image
from datkit.model import DatModel, deformable_layers, forward_classify
from datkit.tensor import no_grad


def key_scores(attention: np.ndarray, groups: int) -> np.ndarray:
    """Attention [M, HW, N_s] summed over queries and the heads of each group -> [G, N_s].

    Normalized so the largest score is exactly 1.
    """
    M = attention.shape[0]
    s = attention.sum(axis=1).reshape(groups, M // groups, -1).sum(axis=1)
    top = s.max()
    return s / top if top > 0 else s


def grayscale(pixels: np.ndarray) -> np.ndarray:
    """[3, H, W] float image -> [H, W] uint8 by channel mean and min-max stretch."""
    g = pixels.mean(axis=0)
    lo, hi = float(g.min()), float(g.max())
    g = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    return np.rint(g * 255).astype(np.uint8)


def render_svg(pixels: np.ndarray, points: np.ndarray, scores: np.ndarray | None = None,
               scale: int = 8, max_radius: float = 12.0, title: str = "") -> str:
    """Raster base with points (image pixel coords, (y, x)) and score circles.

    A point at image pixel (y, x) is drawn at ((x + 0.5) * scale, (y + 0.5) * scale).
    """
    if scale < 1 or max_radius <= 0:
        raise ParameterError("scale must be >= 1 and max_radius > 0")
    _, H, W = pixels.shape
    gray = grayscale(pixels)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W * scale}" height="{H * scale}" '
           f'viewBox="0 0 {W * scale} {H * scale}">']
    if title:
        out.append(f"<title>{title}</title>")
    out.append('<g id="raster" shape-rendering="crispEdges">')
    for y in range(H):
        for x in range(W):
            v = int(gray[y, x])
            out.append(f'<rect x="{x * scale}" y="{y * scale}" width="{scale}" height="{scale}" '
                       f'fill="rgb({v},{v},{v})"/>')
    out.append("</g>")
    pts = points.reshape(-1, 2)
    if scores is not None:
        out.append('<g id="scores" fill="none" stroke="#ff8c00" stroke-width="1.5">')
        for (py, px), s in zip(pts, scores.reshape(-1)):
            out.append(f'<circle cx="{(px + 0.5) * scale:.2f}" cy="{(py + 0.5) * scale:.2f}" '
                       f'r="{float(s) * max_radius:.4f}"/>')
        out.append("</g>")
    out.append('<g id="points" fill="#e0102f">')
    for py, px in pts:
        out.append(f'<circle class="point" cx="{(px + 0.5) * scale:.2f}" '
                   f'cy="{(py + 0.5) * scale:.2f}" r="{max(1.5, scale / 5):.2f}"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def layer_overlays(model: DatModel, pixels: np.ndarray, scale: int = 8,
                   max_radius: float = 12.0) -> list[tuple[str, str, np.ndarray]]:
    """(name, svg, image-space points [G*N_s, 2]) per deformable layer for one image."""
    if not deformable_layers(model):
        raise ConfigError("model has no deformable attention layers")
    cap: list = []
    with no_grad():
        forward_classify(model, pixels[None].astype(model.dtype), capture=cap)
    S = pixels.shape[-1]
    out = []
    for i, rec in enumerate(r for r in cap if r.get("kind") == "deformable"):
        pts = _points_to_image(rec["points"][0], rec["feature_size"], S)  # G N 2
        scores = key_scores(rec["attention"][0], pts.shape[0])
        name = f"deformable_{i}"
        svg = render_svg(pixels, pts, scores, scale, max_radius,
                         title=f"{name} {rec['feature_size'][0]}x{rec['feature_size'][1]}")
        out.append((name, svg, pts.reshape(-1, 2)))
    return out
