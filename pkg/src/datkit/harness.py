"""Toy training loop, synthetic shape data and the offset focus metric."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from datkit.checkpoint import load_arrays, save_arrays
from datkit.errors import ConfigError, NonFiniteError, ParameterError
from datkit.model import DatModel, deformable_layers, forward_classify, named_parameters
from datkit.ops import cross_entropy
from datkit.tensor import Tensor, backward, no_grad

SHAPES = ("square", "disk", "triangle", "cross", "ring", "diamond")


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 32
    num_classes: int = 6
    object_size: tuple[int, int] = (6, 12)
    noise_std: float = 0.6
    samples_per_class: int = 100
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.object_size
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ParameterError(f"num_classes must be in [1, {len(SHAPES)}]")
        if lo < 3 or hi < lo:
            raise ParameterError(f"object_size {self.object_size} must satisfy 3 <= lo <= hi")
        if hi > self.image_size:
            raise ParameterError(f"objects up to {hi}px cannot fit a {self.image_size}px image")
        if self.samples_per_class < 1 or self.noise_std < 0:
            raise ParameterError("samples_per_class must be >= 1 and noise_std >= 0")


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [3, H, W] float32
    label: int
    region_mask: np.ndarray  # [H, W] uint8, 1 inside the object's bounding box


def shape_mask(kind: str, s: int) -> np.ndarray:
    """Boolean s x s footprint of a shape."""
    c = (s - 1) / 2.0
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    dy, dx = y - c, x - c
    rad = s / 2.0
    if kind == "square":
        return np.ones((s, s), dtype=bool)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= rad ** 2
    if kind == "triangle":
        return np.abs(dx) <= (y + 1) / 2.0
    if kind == "cross":
        w = max(1.0, s / 6.0)
        return (np.abs(dy) <= w) | (np.abs(dx) <= w)
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= rad ** 2) & (d2 >= (0.55 * rad) ** 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= rad
    raise ParameterError(f"unknown shape {kind!r}")


def gen_synthetic(spec: SyntheticSpec) -> list[LabeledImage]:
    """Class-balanced images of one shape each over Gaussian noise, in label-interleaved order."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    S = spec.image_size
    lo, hi = spec.object_size
    out = []
    for _ in range(spec.samples_per_class):
        for label in range(spec.num_classes):
            s = int(rng.integers(lo, hi + 1))
            y0, x0 = (int(v) for v in rng.integers(0, S - s + 1, size=2))
            color = rng.uniform(0.6, 1.2, size=3)
            img = rng.normal(0.0, spec.noise_std, size=(3, S, S))
            fp = shape_mask(SHAPES[label], s)
            img[:, y0:y0 + s, x0:x0 + s][:, fp] = color[:, None]
            mask = np.zeros((S, S), dtype=np.uint8)
            mask[y0:y0 + s, x0:x0 + s] = 1
            out.append(LabeledImage(img.astype(np.float32), label, mask))
    return out


def stack(data: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([d.pixels for d in data]), np.array([d.label for d in data], dtype=np.int64),
            np.stack([d.region_mask for d in data]))


def save_dataset(path, data: list[LabeledImage], spec: SyntheticSpec | None = None) -> None:
    x, y, m = stack(data)
    save_arrays(path, {"pixels": x, "labels": y, "masks": m},
                {"spec": asdict(spec) if spec else None})


def load_dataset(path) -> list[LabeledImage]:
    arrays, _ = load_arrays(path)
    return [LabeledImage(p, int(l), m) for p, l, m in
            zip(arrays["pixels"], arrays["labels"], arrays["masks"])]


# -- optimization ------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 2e-3
    warmup_start_lr: float = 1e-6
    final_lr: float = 1e-7
    warmup_steps: int = 20
    total_steps: int = 300
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 32
    eps: float = 1e-8

    def validate(self) -> None:
        if self.total_steps < 1 or not 0 <= self.warmup_steps < self.total_steps:
            raise ParameterError("need 0 <= warmup_steps < total_steps")
        if min(self.warmup_start_lr, self.final_lr, self.base_lr) < 0:
            raise ParameterError("learning rates must be non-negative")
        if self.batch_size < 1 or self.weight_decay < 0:
            raise ParameterError("batch_size must be >= 1 and weight_decay >= 0")


def cosine_warmup_lr(step: int, cfg: OptimConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ParameterError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * step / w
    t = (step - w) / (cfg.total_steps - w)
    return cfg.final_lr + (cfg.base_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * t)) / 2.0


@dataclass
class AdamWState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    decay: list[bool]

    @classmethod
    def init(cls, params: list[Tensor], decay: list[bool] | None = None) -> AdamWState:
        decay = list(decay) if decay is not None else [True] * len(params)
        if len(decay) != len(params):
            raise ParameterError("decay flags must align with params")
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], decay)


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamWState,
               lr: float, cfg: OptimConfig) -> AdamWState:
    """In-place AdamW update with weight decay decoupled from the adaptive step."""
    b1, b2 = cfg.betas
    state.step += 1
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for p, g, m, v, decay in zip(params, grads, state.m, state.v, state.decay):
        if p.data.shape != m.shape:
            raise ParameterError(f"parameter shape {p.data.shape} != state shape {m.shape}")
        if decay and cfg.weight_decay:
            p.data *= p.data.dtype.type(1.0 - lr * cfg.weight_decay)
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= (lr * update).astype(p.data.dtype, copy=False)
    return state


def decay_flags(model: DatModel) -> list[tuple[str, Tensor, bool]]:
    """Trainable tensors with whether weight decay applies.

    Norm parameters, biases, bias tables and the offset network are excluded.
    """
    out = []
    for name, t, kind in named_parameters(model):
        if kind == "buffer":
            continue
        decay = kind == "weight" and t.ndim > 1 and ".offset." not in name
        out.append((name, t, decay))
    return out


# -- focus metric ------------------------------------------------------------------------

def _points_to_image(points: np.ndarray, feat: tuple[int, int], image: int) -> np.ndarray:
    """Normalized (y, x) feature-map points -> continuous image pixel coordinates."""
    out = np.empty_like(points, dtype=np.float64)
    for a, n in enumerate(feat):
        pix = (points[..., a] + 1.0) * max(n - 1, 1) / 2.0
        out[..., a] = (pix + 0.5) * (image / n) - 0.5
    return out


def focus_from_capture(capture: list[dict], masks: np.ndarray) -> float:
    """Mean over images and deformable layers of (fraction of points inside mask) / (mask area)."""
    B, S, _ = masks.shape
    area = masks.reshape(B, -1).mean(axis=1)
    ratios = []
    for rec in capture:
        if rec.get("kind") != "deformable":
            continue
        img = _points_to_image(rec["points"], rec["feature_size"], S)  # B G N 2
        iy = np.rint(img[..., 0]).astype(np.int64)
        ix = np.rint(img[..., 1]).astype(np.int64)
        valid = (iy >= 0) & (iy < S) & (ix >= 0) & (ix < S)
        bidx = np.arange(B).reshape(B, *([1] * (iy.ndim - 1)))
        inside = np.zeros(iy.shape, dtype=bool)
        inside[valid] = masks[np.broadcast_to(bidx, iy.shape)[valid], iy[valid], ix[valid]] > 0
        frac = inside.reshape(B, -1).mean(axis=1)
        ratios.append(frac / area)
    if not ratios:
        raise ConfigError("model has no deformable attention layers")
    return float(np.mean(ratios))


def offset_focus_ratio(model: DatModel, batch: list[LabeledImage]) -> float:
    if not deformable_layers(model):
        raise ConfigError("model has no deformable attention layers")
    x, _, masks = stack(batch)
    capture: list = []
    with no_grad():
        forward_classify(model, x.astype(model.dtype), capture=capture)
    return focus_from_capture(capture, masks)


def evaluate(model: DatModel, data: list[LabeledImage], chunk: int = 100) -> dict:
    """Accuracy and focus ratio (when deformable layers exist) over ``data``."""
    x, y, masks = stack(data)
    correct, focus, n = 0, [], 0
    has_deform = bool(deformable_layers(model))
    with no_grad():
        for i in range(0, len(data), chunk):
            xb = x[i:i + chunk]
            cap: list = []
            logits = forward_classify(model, xb.astype(model.dtype), capture=cap)
            correct += int((logits.data.argmax(axis=1) == y[i:i + chunk]).sum())
            if has_deform:
                focus.append(focus_from_capture(cap, masks[i:i + chunk]) * len(xb))
            n += len(xb)
    out = {"train_accuracy": correct / n}
    if has_deform:
        out["offset_focus_ratio"] = float(sum(focus) / n)
    return out


# -- training ----------------------------------------------------------------------------

@dataclass
class TrainRunRecord:
    seed: int
    steps: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checkpoint: str | None = None
    aborted: bool = False
    diagnostic: str | None = None

    def evals(self) -> list[dict]:
        return [s for s in self.steps if "train_accuracy" in s]

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "step", **s}, sort_keys=True) for s in self.steps]
        lines.append(json.dumps({"type": "summary", "seed": self.seed, "aborted": self.aborted,
                                 "diagnostic": self.diagnostic, "checkpoint": self.checkpoint,
                                 **self.summary}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> TrainRunRecord:
        rows = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
        steps = [{k: v for k, v in r.items() if k != "type"} for r in rows if r["type"] == "step"]
        s = next(r for r in rows if r["type"] == "summary")
        meta = {k: s.pop(k) for k in ("seed", "aborted", "diagnostic", "checkpoint", "type")}
        return cls(meta["seed"], steps, s, meta["checkpoint"], meta["aborted"], meta["diagnostic"])


def _max_offset_px(capture: list[dict]) -> float:
    vals = [float(np.abs(r["offsets_px"]).max()) for r in capture
            if r.get("kind") == "deformable" and r["offsets_px"].size]
    return max(vals) if vals else 0.0


def train_toy(model: DatModel, dataset: list[LabeledImage], cfg: OptimConfig,
              rng: np.random.Generator, eval_every: int = 25, seed: int = 0) -> TrainRunRecord:
    """Cross-entropy training with AdamW and warmup + cosine schedule.

    Evaluation on the full training set runs every ``eval_every`` steps and after
    the last step. A non-finite loss or activation stops the run and marks the
    record as aborted.
    """
    cfg.validate()
    size = model.config.input_size
    if dataset[0].pixels.shape[1:] != (size, size):
        raise ConfigError(f"dataset images {dataset[0].pixels.shape[1:]} do not match model input {size}")
    x_all, y_all, _ = stack(dataset)
    x_all = x_all.astype(model.dtype)
    entries = decay_flags(model)
    params = [t for _, t, _ in entries]
    state = AdamWState.init(params, [d for _, _, d in entries])
    rec = TrainRunRecord(seed)
    order = np.empty(0, dtype=np.int64)
    for step in range(cfg.total_steps):
        lr = cosine_warmup_lr(step, cfg)
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(dataset))])
        idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        capture: list = []
        try:
            logits = forward_classify(model, x_all[idx], training=True, rng=rng, capture=capture)
            loss = cross_entropy(logits, y_all[idx])
            if not np.isfinite(loss.data).all():
                raise NonFiniteError(f"loss is {float(loss.data)}")
        except NonFiniteError as e:
            rec.aborted = True
            rec.diagnostic = f"step {step}: {e}"
            break
        for p in params:
            p.grad = None
        backward(loss)
        adamw_step(params, [p.grad for p in params], state, lr, cfg)
        row = {"step": step, "loss": float(loss.data), "lr": lr,
               "max_offset_px": _max_offset_px(capture)}
        if (step + 1) % eval_every == 0 or step + 1 == cfg.total_steps:
            row.update(evaluate(model, dataset))
        rec.steps.append(row)
    if rec.steps:
        last = rec.evals()[-1] if rec.evals() else {}
        rec.summary = {"final_loss": rec.steps[-1]["loss"],
                       "steps": len(rec.steps),
                       "max_offset_px": max(s["max_offset_px"] for s in rec.steps),
                       **{k: last[k] for k in ("train_accuracy", "offset_focus_ratio") if k in last}}
    return rec
