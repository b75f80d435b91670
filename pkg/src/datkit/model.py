"""The four-stage deformable attention backbone with a linear classifier."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from datkit.attention import (
    BlockParams,
    LayerNormParams,
    Linear,
    MlpParams,
    SraParams,
    WindowAttnParams,
    effective_window,
    param,
    transformer_block,
    trunc_normal,
)
from datkit.deform import DeformAttnConfig, DmhaParams
from datkit.errors import ConfigError, DimensionError, ParameterError
from datkit.ops import conv2d
from datkit.tensor import Tensor

ATTENTION_KINDS = ("shift_window", "deformable", "sra")


@dataclass
class StageConfig:
    depth: int
    channels: int
    heads: int
    window: int = 7
    groups: int | None = None
    attention: str = "shift_window"
    grid_factor: int = 1
    sra_reduction: int = 1
    offset_range: float = 2.0
    offset_kernel: int = 5
    bias_mode: str = "deformable_relative"
    use_offsets: bool = True

    def offset_groups(self) -> int:
        # Unlisted groups follow the deep-stage ratio of four heads per group.
        return self.groups if self.groups is not None else max(1, math.ceil(self.heads / 4))


@dataclass
class DatModelConfig:
    stages: list[StageConfig]
    num_classes: int = 1000
    input_size: int = 224
    in_channels: int = 3
    patch_size: int = 4
    merge_size: int = 2
    mlp_ratio: int = 4
    drop_path_rate: float = 0.2
    name: str = "custom"

    def stage_sizes(self) -> list[int]:
        return [self.input_size // (self.patch_size * self.merge_size ** i) for i in range(4)]

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of 32")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate {self.drop_path_rate} outside [0, 1)")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for i, (st, size) in enumerate(zip(self.stages, self.stage_sizes()), start=1):
            where = f"stage {i}"
            if st.depth < 1:
                raise ConfigError(f"{where}: depth {st.depth} must be >= 1")
            if st.attention not in ATTENTION_KINDS:
                raise ConfigError(f"{where}: unknown attention kind {st.attention!r}")
            if st.heads < 1 or st.channels % st.heads:
                raise ConfigError(f"{where}: heads {st.heads} must divide channels {st.channels}")
            w, _ = effective_window(size, size, st.window, st.window // 2)
            if w < 1 or size % w:
                raise ConfigError(f"{where}: window {st.window} does not divide feature map {size}x{size}")
            if st.attention == "deformable":
                try:
                    cfg = deform_config(st)
                    cfg.check_map(size, size)
                except ConfigError as e:
                    raise ConfigError(f"{where}: {e}") from None
            if st.attention == "sra" and (st.sra_reduction < 1 or size % st.sra_reduction):
                raise ConfigError(f"{where}: SRA reduction {st.sra_reduction} does not divide {size}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> DatModelConfig:
        d = dict(d)
        d["stages"] = [StageConfig(**s) for s in d["stages"]]
        return cls(**d)


def deform_config(st: StageConfig) -> DeformAttnConfig:
    return DeformAttnConfig(st.channels, st.heads, st.offset_groups(), st.grid_factor,
                            st.offset_range, st.offset_kernel, st.bias_mode, st.use_offsets)


_WIDTHS = {"T": (96, 192, 384, 768), "S": (96, 192, 384, 768), "B": (128, 256, 512, 1024)}
_DEPTHS = {"T": (1, 1, 3, 1), "S": (1, 1, 9, 1), "B": (1, 1, 9, 1)}
_HEADS = {"T": (3, 6, 12, 24), "S": (3, 6, 12, 24), "B": (4, 8, 16, 32)}
_GROUPS = {"T": (None, None, 3, 6), "S": (None, None, 3, 6), "B": (None, None, 4, 8)}
_DROP_PATH = {"T": 0.2, "S": 0.3, "B": 0.5}


def preset(variant: str) -> DatModelConfig:
    """Architecture presets: ``T``, ``S``, ``B`` and the desk-scale ``micro``."""
    v = variant.upper() if variant.lower() != "micro" else "micro"
    if v in _WIDTHS:
        kinds = ("shift_window", "shift_window", "deformable", "deformable")
        stages = [
            StageConfig(depth=_DEPTHS[v][i], channels=_WIDTHS[v][i], heads=_HEADS[v][i],
                        window=7, groups=_GROUPS[v][i], attention=kinds[i],
                        sra_reduction=(8, 4, 2, 1)[i])
            for i in range(4)
        ]
        return DatModelConfig(stages, drop_path_rate=_DROP_PATH[v], name=f"DAT-{v}")
    if v == "micro":
        # Deformable on the two finest maps (8x8, 4x4); coarser grids leave too few
        # reference points per object for offsets to be informative.
        kinds = ("deformable", "deformable", "shift_window", "shift_window")
        stages = [
            StageConfig(depth=1, channels=(16, 32, 64, 128)[i], heads=2, window=2, groups=1,
                        attention=kinds[i], sra_reduction=(4, 2, 1, 1)[i])
            for i in range(4)
        ]
        return DatModelConfig(stages, num_classes=6, input_size=32, drop_path_rate=0.0,
                              name="DAT-micro")
    raise ParameterError(f"unknown variant {variant!r}; expected T, S, B or micro")


def with_attention(cfg: DatModelConfig, kinds) -> DatModelConfig:
    """Copy of ``cfg`` with per-stage attention kinds replaced."""
    new = DatModelConfig.from_dict(cfg.to_dict())
    for st, k in zip(new.stages, kinds):
        st.attention = k
    return new


@dataclass
class Transition:
    weight: Tensor  # [C_out, C_in, 2, 2]
    bias: Tensor
    norm: LayerNormParams


@dataclass
class Stage:
    blocks: list[BlockParams]


@dataclass
class DatModel:
    config: DatModelConfig
    patch_weight: Tensor
    patch_bias: Tensor
    patch_norm: LayerNormParams
    stages: list[Stage]
    transitions: list[Transition]
    norm: LayerNormParams
    head: Linear
    dtype: type = field(default=np.float32)


def stage_block_kinds(st: StageConfig) -> list[str]:
    pair = {"shift_window": ("window", "shifted_window"),
            "deformable": ("window", "deformable"),
            "sra": ("sra", "sra")}[st.attention]
    return list(pair) * st.depth


def build_dat(cfg: DatModelConfig, rng: np.random.Generator, dtype=np.float32) -> DatModel:
    cfg.validate()
    sizes = cfg.stage_sizes()
    n_blocks = sum(2 * st.depth for st in cfg.stages)
    rates = np.linspace(0.0, cfg.drop_path_rate, n_blocks) if n_blocks > 1 else np.zeros(1)
    c0 = cfg.stages[0].channels
    patch_w = param(trunc_normal(rng, (c0, cfg.in_channels, cfg.patch_size, cfg.patch_size),
                                 dtype=dtype))
    patch_b = param(np.zeros(c0, dtype=dtype))

    stages, transitions = [], []
    k = 0
    for i, (st, size) in enumerate(zip(cfg.stages, sizes)):
        C = st.channels
        w, shift = effective_window(size, size, st.window, st.window // 2)
        blocks = []
        for kind in stage_block_kinds(st):
            if kind == "window":
                attn = WindowAttnParams.init(rng, C, st.heads, w, 0, dtype)
            elif kind == "shifted_window":
                attn = WindowAttnParams.init(rng, C, st.heads, w, shift, dtype)
            elif kind == "deformable":
                attn = DmhaParams.init(rng, deform_config(st), size, size, dtype)
            else:
                attn = SraParams.init(rng, C, st.heads, st.sra_reduction, dtype)
            blocks.append(BlockParams(LayerNormParams.init(C, dtype), attn,
                                      LayerNormParams.init(C, dtype),
                                      MlpParams.init(rng, C, cfg.mlp_ratio, dtype),
                                      float(rates[k])))
            k += 1
        stages.append(Stage(blocks))
        if i < 3:
            nxt = cfg.stages[i + 1].channels
            m = cfg.merge_size
            transitions.append(Transition(param(trunc_normal(rng, (nxt, C, m, m), dtype=dtype)),
                                          param(np.zeros(nxt, dtype=dtype)),
                                          LayerNormParams.init(nxt, dtype)))
    c4 = cfg.stages[-1].channels
    head = Linear(param(np.zeros((c4, cfg.num_classes), dtype=dtype)),
                  param(np.zeros(cfg.num_classes, dtype=dtype)))
    return DatModel(cfg, patch_w, patch_b, LayerNormParams.init(c0, dtype), stages, transitions,
                    LayerNormParams.init(c4, dtype), head, dtype)


def patch_embed(model: DatModel, images: Tensor) -> Tensor:
    """Images [B, 3, H, W] -> normalized stage-1 tokens [B, H/4, W/4, C1]."""
    cfg = model.config
    p = cfg.patch_size
    x = conv2d(images, model.patch_weight, model.patch_bias, stride=p)
    return model.patch_norm(x.transpose(0, 2, 3, 1))


def forward_features(model: DatModel, images, training: bool = False,
                     rng: np.random.Generator | None = None,
                     capture: list | None = None) -> list[Tensor]:
    """Per-stage outputs [B, H_i, W_i, C_i]."""
    images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.dtype))
    cfg = model.config
    if images.ndim != 4 or images.shape[1] != cfg.in_channels or \
            images.shape[2:] != (cfg.input_size, cfg.input_size):
        raise DimensionError(
            f"expected images [B, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}], "
            f"got {images.shape}")
    x = patch_embed(model, images)
    feats = []
    for i, stage in enumerate(model.stages):
        for b in stage.blocks:
            x = transformer_block(x, b, training, rng, capture)
        feats.append(x)
        if i < 3:
            t = model.transitions[i]
            m = cfg.merge_size
            y = conv2d(x.transpose(0, 3, 1, 2), t.weight, t.bias, stride=m)
            x = t.norm(y.transpose(0, 2, 3, 1))
    return feats


def forward_classify(model: DatModel, images, training: bool = False,
                     rng: np.random.Generator | None = None,
                     capture: list | None = None) -> Tensor:
    """Logits [B, num_classes] from globally pooled, normalized last-stage features."""
    x = forward_features(model, images, training, rng, capture)[-1]
    x = model.norm(x)
    pooled = x.mean(axis=(1, 2))
    return model.head(pooled)


# -- parameter enumeration ----------------------------------------------------------

def _kind(field_name: str) -> str:
    if field_name.endswith("table") or field_name == "fixed_bias":
        return "table"
    if field_name.endswith("bias"):
        return "bias"
    return "weight"


def _walk(obj, prefix: str) -> Iterator[tuple[str, object, str]]:
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}{i}.")
        return
    if not dataclasses.is_dataclass(obj):
        return
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        name = prefix + f.name
        if isinstance(val, Tensor):
            yield name, val, _kind(f.name)
        elif isinstance(val, np.ndarray):
            yield name, val, "buffer"
        elif isinstance(val, (list, tuple)) or (dataclasses.is_dataclass(val)
                                                and not isinstance(val, type)):
            if isinstance(val, (DatModelConfig, DeformAttnConfig, StageConfig)):
                continue
            yield from _walk(val, name + ".")


def named_parameters(model: DatModel) -> list[tuple[str, object, str]]:
    """Deterministic (name, value, kind) list; kind is weight, bias, table or buffer.

    Buffers are the window relative-index matrices and the deformable reference grids.
    """
    return list(_walk(model, ""))


def trainable_parameters(model: DatModel) -> list[tuple[str, Tensor]]:
    return [(n, t) for n, t, k in named_parameters(model) if k != "buffer"]


def deformable_layers(model: DatModel) -> list[DmhaParams]:
    return [b.attn for s in model.stages for b in s.blocks if isinstance(b.attn, DmhaParams)]


def array_of(value) -> np.ndarray:
    """Underlying array of a named_parameters value (Tensor or buffer)."""
    return value.data if isinstance(value, Tensor) else np.asarray(value)
