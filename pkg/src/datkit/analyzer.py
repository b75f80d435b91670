"""Static cost model: FLOPs, parameter counts and activation element counts.

Counts come from the model configuration alone, so full-size variants are analyzed
without allocating their weights. Conventions:

* one multiply-accumulate is one FLOP;
* norms, activations, softmax and pooling cost one FLOP per element;
* interpolating the deformable relative bias costs 8 FLOPs per (query, key, head)
  triple (four weights and four multiply-accumulates);
* bilinear sampling of keys/values costs 4 FLOPs per sampled channel value.

Every number is a Python int.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from datkit.attention import effective_window
from datkit.errors import ParameterError
from datkit.model import DatModel, DatModelConfig, StageConfig, stage_block_kinds

CONVENTIONS = {
    "mac_equals_one_flop": True,
    "elementwise_flops_per_element": 1,
    "bias_interpolation_flops_per_triple": 8,
    "bilinear_sample_flops_per_value": 4,
}

OFFSET_OVERHEAD_NOTE = (
    "The closed-form offset-network term (k^2+2)*N_s*C gives 508,032 FLOPs (0.64% of "
    "the module) for H=W=14, C=384, N_s=49, k=5. The published overhead figure of "
    "5.08M / 6.0% is ten times larger and does not follow from the formula; the "
    "formula value is what this analyzer counts."
)


@dataclass
class LayerCost:
    name: str
    flops: int = 0
    params_learnable: int = 0
    params_with_buffers: int = 0
    activation_elements: int = 0

    def to_dict(self) -> dict:
        return {"name": self.name, "flops": self.flops, "params_learnable": self.params_learnable,
                "params_with_buffers": self.params_with_buffers,
                "activation_elements": self.activation_elements}


@dataclass
class CostReport:
    model: str
    input_shape: tuple[int, int, int]
    layers: list[LayerCost] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    @property
    def flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def params_learnable(self) -> int:
        return sum(l.params_learnable for l in self.layers)

    @property
    def params_with_buffers(self) -> int:
        return sum(l.params_with_buffers for l in self.layers)

    @property
    def activation_elements(self) -> int:
        return sum(l.activation_elements for l in self.layers)

    def totals(self) -> dict:
        return {"flops": self.flops, "params_learnable": self.params_learnable,
                "params_with_buffers": self.params_with_buffers,
                "activation_elements": self.activation_elements}

    def to_dict(self) -> dict:
        return {"model": self.model, "input_shape": list(self.input_shape),
                "conventions": self.conventions, "totals": self.totals(),
                "layers": [l.to_dict() for l in self.layers], "notes": list(self.notes)}

    def to_json(self) -> str:
        # Insertion order is fixed above; sort_keys is left off so totals stay on top.
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        head = ("layer", "flops", "params", "params+buffers", "activations")
        rows = [(l.name, f"{l.flops:,}", f"{l.params_learnable:,}",
                 f"{l.params_with_buffers:,}", f"{l.activation_elements:,}") for l in self.layers]
        t = self.totals()
        rows.append(("TOTAL", f"{t['flops']:,}", f"{t['params_learnable']:,}",
                     f"{t['params_with_buffers']:,}", f"{t['activation_elements']:,}"))
        widths = [max(len(r[i]) for r in [head, *rows]) for i in range(5)]
        fmt = lambda r: "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i])
                                  for i, c in enumerate(r))
        lines = [f"{self.model} @ {'x'.join(map(str, self.input_shape))}", fmt(head),
                 "  ".join("-" * w for w in widths)]
        lines += [fmt(r) for r in rows]
        lines.append(f"FLOPs {t['flops'] / 1e9:.3f}G  params {t['params_learnable'] / 1e6:.3f}M "
                     f"(with buffers {t['params_with_buffers'] / 1e6:.3f}M)")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


# -- closed forms ---------------------------------------------------------------------

def dmha_flops(H: int, W: int, C: int, r: int = 1, k: int = 5) -> dict:
    """Four closed-form terms of the deformable attention cost."""
    if min(H, W, C, r, k) < 1:
        raise ParameterError("H, W, C, r and k must be positive")
    if H % r or W % r:
        raise ParameterError(f"grid factor r={r} does not divide {H}x{W}")
    hw = H * W
    ns = hw // (r * r)
    out = {
        "attention": 2 * hw * ns * C,
        "projections_q_o": 2 * hw * C * C,
        "projections_k_v": 2 * ns * C * C,
        "offset_net": (k * k + 2) * ns * C,
    }
    out["vanilla"] = out["attention"] + out["projections_q_o"] + out["projections_k_v"]
    out["total"] = out["vanilla"] + out["offset_net"]
    out["sampled_keys"] = ns
    return out


# -- per-layer counts -------------------------------------------------------------------

def _conv(name, c_in, c_out, k, h_out, w_out, groups=1, bias=True) -> LayerCost:
    n = c_out * (c_in // groups) * k * k + (c_out if bias else 0)
    return LayerCost(name, c_out * (c_in // groups) * k * k * h_out * w_out, n, n,
                     c_out * h_out * w_out)


def _norm(name, positions, C) -> LayerCost:
    return LayerCost(name, positions * C, 2 * C, 2 * C, positions * C)


def _attn_core(N, keys, C, M) -> tuple[int, int]:
    """(flops, activations) of QK^T, softmax and AV for N queries over ``keys`` keys."""
    return 2 * N * keys * C + N * keys * M, N * keys * M


def _window_block(name, size, st: StageConfig, shifted: bool) -> LayerCost:
    C, M, N = st.channels, st.heads, size * size
    w, _ = effective_window(size, size, st.window, st.window // 2)
    f_attn, a_attn = _attn_core(N, w * w, C, M)
    learn = 4 * C * C + 4 * C + (2 * w - 1) ** 2 * M
    return LayerCost(name, 4 * N * C * C + f_attn, learn, learn + w ** 4, 4 * N * C + a_attn)


def _sra_block(name, size, st: StageConfig) -> LayerCost:
    C, M, N, R = st.channels, st.heads, size * size, st.sra_reduction
    nk = N // (R * R)
    f_attn, a_attn = _attn_core(N, nk, C, M)
    flops = 2 * N * C * C + 2 * nk * C * C + f_attn
    learn = 4 * C * C + 4 * C
    acts = 2 * N * C + 2 * nk * C + a_attn
    if R > 1:
        flops += nk * C * C * R * R + nk * C
        learn += C * C * R * R + C + 2 * C
        acts += 2 * nk * C
    return LayerCost(name, flops, learn, learn, acts)


def _dmha_block(name, size, st: StageConfig) -> LayerCost:
    C, M, N, r = st.channels, st.heads, size * size, st.grid_factor
    G, k = st.offset_groups(), st.offset_kernel
    base = dmha_flops(size, size, C, r, k)
    ns = base["sampled_keys"]
    f_attn, a_attn = _attn_core(N, ns, C, M)
    flops = base["vanilla"] + N * ns * M  # softmax on top of the closed form
    learn = 4 * C * C + 4 * C
    acts = 2 * N * C + 3 * ns * C + a_attn
    if st.use_offsets:
        cg = C // G
        # dw conv + pw conv, plus GELU and the bounded tanh, plus sampling.
        flops += base["offset_net"] + ns * C + 2 * ns * G + 4 * ns * C
        learn += cg * k * k + cg + 2 * cg
        acts += ns * C + 2 * ns * G
    if st.bias_mode == "deformable_relative":
        flops += 8 * N * ns * M
        learn += M * (2 * size - 1) ** 2
        acts += N * ns * M
    elif st.bias_mode == "fixed":
        learn += M * N * ns
    elif st.bias_mode == "depthwise_conv":
        flops += 9 * N * C
        learn += 9 * C + C
        acts += N * C
    return LayerCost(name, flops, learn, learn + 2 * ns, acts)


def _mlp(name, N, C, ratio) -> LayerCost:
    h = C * ratio
    n = 2 * C * h + h + C
    return LayerCost(name, 2 * N * C * h + N * h, n, n, 2 * N * h + N * C)


def _config_of(model) -> DatModelConfig:
    if isinstance(model, DatModel):
        return model.config
    if isinstance(model, DatModelConfig):
        return model
    raise ParameterError(f"expected DatModel or DatModelConfig, got {type(model).__name__}")


def _report(model, input_shape=None) -> CostReport:
    cfg = _config_of(model)
    if input_shape is not None:
        if tuple(input_shape) != (cfg.in_channels, cfg.input_size, cfg.input_size):
            cfg = DatModelConfig.from_dict({**cfg.to_dict(), "input_size": int(input_shape[-1])})
            if input_shape[-1] != input_shape[-2]:
                raise ParameterError(f"only square inputs are modeled, got {tuple(input_shape)}")
    cfg.validate()
    sizes = cfg.stage_sizes()
    rep = CostReport(cfg.name, (cfg.in_channels, cfg.input_size, cfg.input_size))
    L = rep.layers
    s0 = sizes[0]
    L.append(_conv("patch_embed", cfg.in_channels, cfg.stages[0].channels, cfg.patch_size, s0, s0))
    L.append(_norm("patch_norm", s0 * s0, cfg.stages[0].channels))
    for i, (st, size) in enumerate(zip(cfg.stages, sizes)):
        N, C = size * size, st.channels
        for j, kind in enumerate(stage_block_kinds(st)):
            pre = f"stages.{i}.blocks.{j}"
            L.append(_norm(f"{pre}.norm1", N, C))
            if kind in ("window", "shifted_window"):
                L.append(_window_block(f"{pre}.attn[{kind}]", size, st, kind == "shifted_window"))
            elif kind == "deformable":
                L.append(_dmha_block(f"{pre}.attn[deformable]", size, st))
            else:
                L.append(_sra_block(f"{pre}.attn[sra]", size, st))
            L.append(_norm(f"{pre}.norm2", N, C))
            L.append(_mlp(f"{pre}.mlp", N, C, cfg.mlp_ratio))
        if i < 3:
            nxt, m = cfg.stages[i + 1].channels, cfg.merge_size
            L.append(_conv(f"transitions.{i}", C, nxt, m, size // m, size // m))
            L.append(_norm(f"transitions.{i}.norm", (size // m) ** 2, nxt))
    s4, c4 = sizes[-1], cfg.stages[-1].channels
    L.append(_norm("norm", s4 * s4, c4))
    L.append(LayerCost("pool", s4 * s4 * c4, 0, 0, c4))
    n = c4 * cfg.num_classes + cfg.num_classes
    L.append(LayerCost("head", c4 * cfg.num_classes, n, n, cfg.num_classes))
    if any(st.attention == "deformable" and st.use_offsets for st in cfg.stages):
        rep.notes.append(OFFSET_OVERHEAD_NOTE)
    return rep


def count_flops(model, input_shape=None) -> CostReport:
    """Per-layer cost report for a model or config at ``input_shape`` = (C, H, W)."""
    return _report(model, input_shape)


def count_params(model, include_buffers: bool = False) -> CostReport:
    """Same report; ``include_buffers`` picks which parameter total is reported first."""
    rep = _report(model)
    rep.conventions = {**rep.conventions, "include_buffers": bool(include_buffers)}
    return rep


def param_total(model, include_buffers: bool = False) -> int:
    rep = _report(model)
    return rep.params_with_buffers if include_buffers else rep.params_learnable


# -- D-DETR comparison ----------------------------------------------------------------

def ddetr_layer_cost(H: int, W: int, C: int, M: int, K: int) -> LayerCost:
    """One D-DETR-style attention layer: K points per query and head."""
    N = H * W
    flops = (2 * N * C * C            # value and output projections
             + N * C * M * K * 2      # offset head
             + N * C * M * K          # attention-weight head
             + N * M * K              # softmax
             + 4 * N * K * C          # bilinear sampling per query
             + N * K * C)             # weighted sum over points
    learn = 2 * (C * C + C) + C * M * K * 2 + M * K * 2 + C * M * K + M * K
    acts = 2 * N * C + N * M * K * 3 + N * K * C
    return LayerCost("ddetr", flops, learn, learn, acts)


def dmha_layer_cost(H: int, W: int, C: int, M: int, keys: int, G: int = 1,
                    k: int = 5) -> LayerCost:
    """One deformable attention layer with ``keys`` shared sampled keys."""
    N = H * W
    flops = (2 * N * keys * C + 2 * N * C * C + 2 * keys * C * C + (k * k + 2) * keys * C
             + N * keys * M + keys * C + 2 * keys * G + 4 * keys * C + 8 * N * keys * M)
    learn = 4 * C * C + 4 * C + (C // G) * (k * k + 3) + M * (2 * H - 1) * (2 * W - 1)
    acts = 2 * N * C + 4 * keys * C + 2 * keys * G + 2 * N * keys * M
    return LayerCost("dmha", flops, learn, learn + 2 * keys, acts)


@dataclass
class DdetrComparison:
    stage_shapes: list[tuple[int, int, int, int]]
    ddetr_keys: tuple[int, int]
    dat_keys: tuple[int, int]
    ddetr: dict
    dat: dict
    flops_ratio: float
    activation_ratio: float
    note: str = ("Ratios are analytic element counts for the attention layers only; "
                 "whole-network GPU memory and accuracy at full scale are out of reach here.")

    def to_dict(self) -> dict:
        return {"stage_shapes": [list(s) for s in self.stage_shapes],
                "ddetr_keys": list(self.ddetr_keys), "dat_keys": list(self.dat_keys),
                "ddetr": self.ddetr, "dat": self.dat, "flops_ratio": self.flops_ratio,
                "activation_ratio": self.activation_ratio, "note": self.note}


def compare_ddetr(H: int, W: int, C: int, M: int, K_stage3: int, K_stage4: int,
                  dat_keys: tuple[int, int] | None = None, depths: tuple[int, int] = (1, 1),
                  groups: tuple[int, int] | None = None) -> DdetrComparison:
    """D-DETR-style vs deformable attention costs over the last two stages.

    (H, W, C, M) describe stage 3; stage 4 halves the map and doubles C and M.
    D-DETR uses ``K_stage*`` points per query; the deformable layers use ``dat_keys``
    shared keys, defaulting to every position of each stage's map.
    """
    if min(H, W, C, M, K_stage3, K_stage4) < 1 or min(depths) < 0:
        raise ParameterError("all counts must be positive")
    if C % M or H % 2 or W % 2:
        raise ParameterError("need M | C and an even stage-3 map")
    shapes = [(H, W, C, M), (H // 2, W // 2, 2 * C, 2 * M)]
    dat_keys = tuple(dat_keys) if dat_keys is not None else (H * W, (H // 2) * (W // 2))
    groups = groups or (max(1, M // 4), max(1, 2 * M // 4))
    tot = {"ddetr": [0, 0, 0], "dat": [0, 0, 0]}
    for (h, w, c, m), kd, kt, g, d in zip(shapes, (K_stage3, K_stage4), dat_keys, groups, depths):
        for key, lc in (("ddetr", ddetr_layer_cost(h, w, c, m, kd)),
                        ("dat", dmha_layer_cost(h, w, c, m, kt, g))):
            t = tot[key]
            t[0] += d * lc.flops
            t[1] += d * lc.activation_elements
            t[2] += d * lc.params_learnable
    pack = lambda t: {"flops": t[0], "activation_elements": t[1], "params_learnable": t[2]}
    dd, da = pack(tot["ddetr"]), pack(tot["dat"])
    return DdetrComparison(shapes, (K_stage3, K_stage4), dat_keys, dd, da,
                           dd["flops"] / da["flops"] if da["flops"] else math.inf,
                           dd["activation_elements"] / da["activation_elements"])
