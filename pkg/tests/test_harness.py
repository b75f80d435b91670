import math

import numpy as np
import pytest

from datkit import ConfigError, ParameterError, Tensor
from datkit.harness import (
    AdamWState,
    LabeledImage,
    OptimConfig,
    SyntheticSpec,
    TrainRunRecord,
    adamw_step,
    cosine_warmup_lr,
    decay_flags,
    focus_from_capture,
    gen_synthetic,
    load_dataset,
    offset_focus_ratio,
    save_dataset,
    shape_mask,
    train_toy,
)
from datkit.model import build_dat, deformable_layers, named_parameters, preset, with_attention


def micro(seed=0):
    return build_dat(preset("micro"), np.random.default_rng(seed))


# -- data ------------------------------------------------------------------------------------

def test_synthetic_deterministic():
    a = gen_synthetic(SyntheticSpec(samples_per_class=5, seed=3))
    b = gen_synthetic(SyntheticSpec(samples_per_class=5, seed=3))
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.label == y.label and np.array_equal(x.region_mask, y.region_mask)


def test_synthetic_balanced():
    data = gen_synthetic(SyntheticSpec(num_classes=4, samples_per_class=100))
    assert len(data) == 400
    assert np.bincount([d.label for d in data]).tolist() == [100] * 4


def test_synthetic_mask_area_fraction():
    data = gen_synthetic(SyntheticSpec())
    frac = np.array([d.region_mask.mean() for d in data])
    assert frac.min() > 0 and frac.max() < 0.5
    assert all(d.pixels.shape == (3, 32, 32) and d.pixels.dtype == np.float32 for d in data)


def test_synthetic_object_inside_mask():
    spec = SyntheticSpec(noise_std=0.0, samples_per_class=3)
    for d in gen_synthetic(spec):
        lit = np.abs(d.pixels).sum(axis=0) > 0
        assert lit.any() and not (lit & (d.region_mask == 0)).any()


def test_synthetic_impossible_geometry():
    with pytest.raises(ParameterError):
        gen_synthetic(SyntheticSpec(image_size=16, object_size=(10, 20)))
    with pytest.raises(ParameterError):
        gen_synthetic(SyntheticSpec(num_classes=9))


def test_shapes_are_distinct():
    masks = [shape_mask(k, 12).tobytes() for k in ("square", "disk", "triangle", "cross", "ring", "diamond")]
    assert len(set(masks)) == 6


def test_dataset_cache_roundtrip(tmp_path):
    data = gen_synthetic(SyntheticSpec(samples_per_class=3))
    save_dataset(tmp_path / "d.bin", data)
    back = load_dataset(tmp_path / "d.bin")
    for a, b in zip(data, back):
        assert a.pixels.tobytes() == b.pixels.tobytes() and a.label == b.label
        assert np.array_equal(a.region_mask, b.region_mask)


# -- schedule and optimizer --------------------------------------------------------------------

def test_lr_endpoints():
    cfg = OptimConfig()
    assert cosine_warmup_lr(0, cfg) == 1e-6
    assert cosine_warmup_lr(cfg.total_steps, cfg) == 1e-7
    assert cosine_warmup_lr(cfg.warmup_steps, cfg) == cfg.base_lr


def test_lr_cosine_midpoint():
    cfg = OptimConfig(warmup_steps=20, total_steps=300)
    assert cosine_warmup_lr(160, cfg) == pytest.approx((cfg.base_lr + cfg.final_lr) / 2, rel=1e-12)


def test_lr_warmup_linear():
    cfg = OptimConfig(warmup_steps=10)
    lrs = [cosine_warmup_lr(i, cfg) for i in range(11)]
    np.testing.assert_allclose(np.diff(lrs), (cfg.base_lr - cfg.warmup_start_lr) / 10, rtol=1e-9)


def test_lr_out_of_range():
    with pytest.raises(ParameterError):
        cosine_warmup_lr(301, OptimConfig())
    with pytest.raises(ParameterError):
        cosine_warmup_lr(-1, OptimConfig())


def test_optim_config_invariants():
    with pytest.raises(ParameterError):
        OptimConfig(warmup_steps=300, total_steps=300).validate()


def test_adamw_zero_grad_is_pure_decay():
    w = Tensor(np.array([1.5, -2.0, 0.25]))
    before = w.data.copy()
    cfg = OptimConfig(weight_decay=0.05)
    adamw_step([w], [np.zeros(3)], AdamWState.init([w]), 0.1, cfg)
    assert np.array_equal(w.data, before * (1 - 0.1 * 0.05))


def test_adamw_first_step():
    w = Tensor(np.array([1.0]))
    adamw_step([w], [np.array([1.0])], AdamWState.init([w]), 0.1, OptimConfig(weight_decay=0.0))
    assert abs(w.data[0] - 0.9) < 1e-6


def test_adamw_two_steps_match_hand_values():
    w = Tensor(np.array([0.0]))
    st = AdamWState.init([w])
    cfg = OptimConfig(weight_decay=0.0)
    for g in (1.0, -1.0):
        adamw_step([w], [np.array([g])], st, 0.01, cfg)
    m = 0.9 * 0.1 - 0.1
    v = 0.999 * 0.001 + 0.001
    expected = -0.01 * (1 / (1 + 1e-8)) - 0.01 * (m / 0.19) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert abs(w.data[0] - expected) < 1e-12


def test_decay_exclusions():
    m = micro()
    flags = {n: d for n, _, d in decay_flags(m)}
    kinds = {n: k for n, _, k in named_parameters(m)}
    for n, d in flags.items():
        if kinds[n] in ("bias", "table") or ".offset." in n or "norm" in n:
            assert not d, n
    assert flags["stages.0.blocks.0.attn.attn.q.weight"]


def test_excluded_params_unchanged_under_zero_grad_step():
    m = micro()
    entries = decay_flags(m)
    params = [t for _, t, _ in entries]
    before = [t.data.copy() for t in params]
    st = AdamWState.init(params, [d for _, _, d in entries])
    adamw_step(params, [np.zeros_like(t.data) for t in params], st, 1e-2, OptimConfig())
    for (n, t, d), b in zip(entries, before):
        if d:
            assert not np.array_equal(t.data, b) or not b.any(), n
        else:
            assert np.array_equal(t.data, b), n


# -- focus metric ---------------------------------------------------------------------------------

def _record(points, size):
    return {"kind": "deformable", "feature_size": (size, size), "points": points}


def test_focus_whole_image_mask_is_one():
    pts = np.random.default_rng(0).uniform(-1, 1, size=(2, 1, 9, 2))
    masks = np.ones((2, 16, 16), dtype=np.uint8)
    assert focus_from_capture([_record(pts, 4)], masks) == 1.0


def test_focus_all_inside_half_mask_is_two():
    masks = np.zeros((1, 16, 16), dtype=np.uint8)
    masks[0, :, :8] = 1
    # 4x4 feature map of a 16px image: feature column 0 sits at image column 1.5.
    pts = np.array([[[[-1.0, -1.0], [0.3, -1.0], [1.0, -0.9]]]])
    assert focus_from_capture([_record(pts, 4)], masks) == 2.0


def test_focus_points_outside_image_count_as_misses():
    masks = np.ones((1, 16, 16), dtype=np.uint8)
    pts = np.array([[[[-3.0, 0.0], [0.0, 0.0]]]])
    assert focus_from_capture([_record(pts, 4)], masks) == 0.5


def test_focus_needs_deformable_layers():
    m = build_dat(with_attention(preset("micro"), ["shift_window"] * 4), np.random.default_rng(0))
    data = gen_synthetic(SyntheticSpec(samples_per_class=1))
    with pytest.raises(ConfigError):
        offset_focus_ratio(m, data)


def test_zero_offset_baseline_near_one():
    m = micro()
    for layer in deformable_layers(m):
        layer.offset.pw_weight.data[...] = 0
    data = gen_synthetic(SyntheticSpec(samples_per_class=50, seed=4))
    assert abs(offset_focus_ratio(m, data) - 1.0) < 0.15


# -- training ----------------------------------------------------------------------------------

def small_data(n=4, seed=0):
    return gen_synthetic(SyntheticSpec(samples_per_class=n, seed=seed))


def test_train_zero_lr_changes_nothing():
    m = micro()
    before = [t.data.copy() for _, t, _ in decay_flags(m)]
    data = small_data(2)
    cfg = OptimConfig(base_lr=0.0, warmup_start_lr=0.0, final_lr=0.0, total_steps=4,
                      warmup_steps=1, batch_size=len(data))
    rec = train_toy(m, data, cfg, np.random.default_rng(0), eval_every=2)
    for (_, t, _), b in zip(decay_flags(m), before):
        assert np.array_equal(t.data, b)
    losses = [s["loss"] for s in rec.steps]
    np.testing.assert_allclose(losses, losses[0], rtol=1e-6)


def test_train_deterministic():
    cfg = OptimConfig(total_steps=6, warmup_steps=2, batch_size=8)
    recs = [train_toy(micro(1), small_data(), cfg, np.random.default_rng(5), eval_every=3)
            for _ in range(2)]
    assert recs[0].to_jsonl() == recs[1].to_jsonl()
    assert len(recs[0].steps) == 6 and [s["step"] for s in recs[0].steps] == list(range(6))
    assert len(recs[0].evals()) == 2


def test_train_records_and_roundtrip(tmp_path):
    cfg = OptimConfig(total_steps=3, warmup_steps=1, batch_size=8)
    rec = train_toy(micro(), small_data(), cfg, np.random.default_rng(0), eval_every=2)
    last = rec.steps[-1]
    assert {"loss", "lr", "max_offset_px", "train_accuracy", "offset_focus_ratio"} <= set(last)
    rec.write(tmp_path / "run.jsonl")
    back = TrainRunRecord.read(tmp_path / "run.jsonl")
    assert back.to_jsonl() == rec.to_jsonl()


def test_train_nan_aborts_with_diagnostic():
    m = micro()
    m.head.bias.data[...] = np.nan
    cfg = OptimConfig(total_steps=5, warmup_steps=1, batch_size=4)
    rec = train_toy(m, small_data(1), cfg, np.random.default_rng(0))
    assert rec.aborted and "step 0" in rec.diagnostic
    assert rec.steps == []


def test_train_input_size_mismatch():
    data = [LabeledImage(np.zeros((3, 16, 16), np.float32), 0, np.ones((16, 16), np.uint8))]
    with pytest.raises(ConfigError):
        train_toy(micro(), data, OptimConfig(), np.random.default_rng(0))


def test_learning_sanity_over_three_seeds():
    drops = []
    for seed in range(3):
        cfg = OptimConfig(total_steps=50, warmup_steps=5)
        rec = train_toy(micro(seed), small_data(25, seed), cfg, np.random.default_rng(seed),
                        eval_every=1000)
        drops.append(np.mean([s["loss"] for s in rec.steps[-5:]]) - rec.steps[0]["loss"])
    assert np.mean(drops) < 0


def test_micro_400_samples_300_steps_learns():
    cfg = preset("micro")
    cfg.num_classes = 4
    data = gen_synthetic(SyntheticSpec(num_classes=4, samples_per_class=100))
    assert len(data) == 400
    rec = train_toy(build_dat(cfg, np.random.default_rng(0)), data, OptimConfig(),
                    np.random.default_rng(0), eval_every=300)
    assert not rec.aborted and rec.summary["train_accuracy"] > 0.8
