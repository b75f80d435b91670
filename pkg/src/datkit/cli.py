"""Command-line entry point: analyze, gradcheck, train, viz, compare-ddetr.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Every command
validates its inputs before creating any output file.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from datkit.errors import ConfigError, DatError, DimensionError, ParameterError

CONFIG_SCHEMA = "datkit-config/1"
KINDS = ("shift_window", "deformable", "sra")


class UsageError(Exception):
    """Bad arguments; reported with exit code 2."""


# -- shared config handling -----------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser, default_variant: str) -> None:
    p.add_argument("--variant", default=None, help=f"T, S, B or micro (default {default_variant})")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--attention", help="four comma-separated stage kinds: " + ", ".join(KINDS))
    p.add_argument("--stage4-only-deformable", action="store_true",
                   help="shift-window attention in stages 1-3, deformable in stage 4")
    p.add_argument("--s", type=float, dest="offset_range", help="offset range factor (pixels)")
    p.add_argument("--r", type=int, dest="grid_factor", help="reference grid downsampling")
    p.add_argument("--k", type=int, dest="offset_kernel", help="offset network kernel size")
    p.add_argument("--bias-mode", choices=["none", "fixed", "depthwise_conv", "deformable_relative"])
    p.add_argument("--window", type=int, help="window size for every stage")
    p.add_argument("--no-offsets", action="store_true", help="disable offset generation")
    p.set_defaults(default_variant=default_variant)


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--format", choices=["json", "table"], default="table")


def _load_config_file(path: str) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    if d.get("schema") != CONFIG_SCHEMA:
        raise UsageError(f"config {path}: schema must be {CONFIG_SCHEMA!r}")
    return d


def model_config(args):
    """DatModelConfig from variant/config file plus flag overrides, validated."""
    from datkit.model import DatModelConfig, preset

    file_cfg = _load_config_file(args.config) if args.config else {}
    variant = args.variant or file_cfg.get("variant") or args.default_variant
    try:
        cfg = DatModelConfig.from_dict(file_cfg["model"]) if "model" in file_cfg else preset(variant)
    except (TypeError, KeyError) as e:
        raise UsageError(f"bad model section in config: {e}") from None
    if args.variant and "model" in file_cfg:
        cfg = preset(args.variant)
    over = dict(file_cfg.get("overrides", {}))
    for key in ("attention", "offset_range", "grid_factor", "offset_kernel", "bias_mode", "window"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if args.stage4_only_deformable:
        over["attention"] = "shift_window,shift_window,shift_window,deformable"
    if args.no_offsets:
        over["use_offsets"] = False
    if "attention" in over:
        kinds = over.pop("attention")
        kinds = kinds.split(",") if isinstance(kinds, str) else list(kinds)
        if len(kinds) != 4 or any(k not in KINDS for k in kinds):
            raise UsageError(f"--attention needs four kinds from {KINDS}, got {kinds}")
        for st, k in zip(cfg.stages, kinds):
            st.attention = k
    if "window" in over:
        w = int(over.pop("window"))
        for st in cfg.stages:
            st.window = w
    for key in ("offset_range", "grid_factor", "offset_kernel", "bias_mode", "use_offsets"):
        if key in over:
            for st in cfg.stages:
                setattr(st, key, over[key])
            over.pop(key)
    if over:
        raise UsageError(f"unknown overrides {sorted(over)}")
    cfg.validate()
    return cfg


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# -- commands ------------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    from datkit.analyzer import count_flops

    cfg = model_config(args)
    if args.input is not None:
        if args.input <= 0 or args.input % 32:
            raise ConfigError(f"--input {args.input} must be a positive multiple of 32")
        cfg.input_size = args.input
        cfg.validate()
    rep = count_flops(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json() + "\n")
    (out / "report.txt").write_text(rep.to_table() + "\n")
    _emit(rep.to_json() if args.format == "json" else rep.to_table())
    return 0


def cmd_gradcheck(args) -> int:
    from datkit.battery import CHECKS, DEFAULT_TOL, run_battery

    names = [n for group in (args.op or []) for n in group.split(",") if n] or list(CHECKS)
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise UsageError(f"unknown --op {unknown}; available: {', '.join(CHECKS)}")
    tol = DEFAULT_TOL if args.tol is None else args.tol
    if not tol > 0:
        raise UsageError("--tol must be positive")
    results = run_battery(names, seed=args.seed)
    ok = all(v < tol for v in results.values())
    if args.format == "json":
        _emit(json.dumps({"tolerance": tol, "passed": ok, "max_relative_error": results}, indent=2))
    else:
        w = max(map(len, names))
        for n, v in results.items():
            _emit(f"{n.ljust(w)}  {v:.3e}  {'PASS' if v < tol else 'FAIL'}")
        _emit(f"{sum(v < tol for v in results.values())}/{len(results)} below {tol:g}")
    return 0 if ok else 1


def _dataset(args, spec, out: Path | None):
    from datkit.harness import gen_synthetic, load_dataset, save_dataset

    if args.dataset and Path(args.dataset).exists():
        return load_dataset(args.dataset)
    data = gen_synthetic(spec)
    if out is not None:
        save_dataset(out / "dataset.bin", data, spec)
    return data


def cmd_train(args) -> int:
    from datkit.harness import OptimConfig, SyntheticSpec, evaluate, train_toy
    from datkit.checkpoint import save_checkpoint
    from datkit.model import build_dat, deformable_layers

    cfg = model_config(args)
    dtype = {"float32": np.float32, "float64": np.float64}[args.dtype]
    spec = SyntheticSpec(image_size=cfg.input_size, num_classes=cfg.num_classes,
                         samples_per_class=args.samples_per_class, seed=args.seed)
    spec.validate()
    opt = OptimConfig(base_lr=args.lr, total_steps=args.steps, batch_size=args.batch_size,
                      warmup_steps=min(args.warmup, args.steps - 1))
    opt.validate()
    if args.eval_every < 1:
        raise UsageError("--eval-every must be >= 1")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _dataset(args, spec, out)
    model = build_dat(cfg, np.random.default_rng(args.seed), dtype=dtype)
    summary = {"seed": args.seed, "steps": args.steps, "model": cfg.name}
    if deformable_layers(model):
        base = copy.deepcopy(model)
        for layer in deformable_layers(base):
            if layer.offset is not None:
                layer.offset.pw_weight.data[...] = 0
        summary["baseline_offset_focus_ratio"] = evaluate(base, data)["offset_focus_ratio"]
    rec = train_toy(model, data, opt, np.random.default_rng(args.seed), args.eval_every, args.seed)
    rec.checkpoint = "model.ckpt"
    save_checkpoint(out / "model.ckpt", model, {"dataset_spec": asdict(spec), "seed": args.seed})
    rec.write(out / "run.jsonl")
    summary.update(rec.summary)
    summary["aborted"] = rec.aborted
    if rec.diagnostic:
        summary["diagnostic"] = rec.diagnostic
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(json.dumps(summary, indent=2, sort_keys=True) if args.format == "json" else
          "\n".join(f"{k}: {v}" for k, v in sorted(summary.items())))
    return 1 if rec.aborted else 0


def cmd_viz(args) -> int:
    from datkit.checkpoint import load_checkpoint
    from datkit.harness import SyntheticSpec, gen_synthetic, load_dataset
    from datkit.model import deformable_layers
    from datkit.viz import layer_overlays

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    if args.dataset and not Path(args.dataset).exists():
        raise UsageError(f"dataset {args.dataset} not found")
    if args.scale < 1 or args.max_radius <= 0:
        raise UsageError("--scale must be >= 1 and --max-radius > 0")
    model, meta = load_checkpoint(ckpt)
    if not deformable_layers(model):
        raise ConfigError("checkpoint has no deformable attention layers")
    if args.dataset:
        data = load_dataset(args.dataset)
    else:
        spec = meta.get("dataset_spec")
        if spec is None:
            raise UsageError("checkpoint has no dataset spec; pass --dataset")
        spec["object_size"] = tuple(spec["object_size"])
        data = gen_synthetic(SyntheticSpec(**spec))
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} outside dataset of {len(data)}")
    overlays = layer_overlays(model, data[args.index].pixels, args.scale, args.max_radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, svg, _ in overlays:
        path = out / f"image{args.index}_{name}.svg"
        path.write_text(svg)
        _emit(str(path))
    return 0


def _valid_dat_keys(H: int, W: int) -> set[int]:
    return {(H // r) * (W // r) for r in range(1, min(H, W) + 1) if H % r == 0 and W % r == 0}


def cmd_compare_ddetr(args) -> int:
    from datkit.analyzer import compare_ddetr, ddetr_layer_cost, dmha_layer_cost
    from datkit.deform import DdetrParams, DeformAttnConfig, DmhaParams, ddetr_attention, dmha_forward
    from datkit.tensor import Tensor, no_grad

    keys = [int(k) for k in args.keys.split(",") if k]
    if not keys or min(keys) < 1:
        raise UsageError("--keys needs positive integers")
    H, C, M = args.H, args.C, args.M
    if H < 2 or H % 2 or C % M or C % (2 * M):
        raise UsageError("need an even --H and --M dividing --C")
    s3, s4 = H * H, (H // 2) ** 2
    rows = []
    for K in keys:
        k4 = min(K, s4)
        matched = K in _valid_dat_keys(H, H)
        dat = (K, k4 if k4 in _valid_dat_keys(H // 2, H // 2) else s4) if matched else (s3, s4)
        c = compare_ddetr(H, H, C, M, K, k4, dat_keys=dat, depths=(args.depth3, args.depth4))
        rows.append({"K": [K, k4], **c.to_dict()})

    # Micro-scale enumeration: element counts of real forwards vs the closed forms.
    rng = np.random.default_rng(args.seed)
    h, c, m, k = 4, 8, 2, 4
    x = Tensor(rng.normal(size=(1, h, h, c)))
    dd = DdetrParams.init(rng, c, m, k, dtype=np.float64)
    dm = DmhaParams.init(rng, DeformAttnConfig(c, m, 1, grid_factor=2), h, h, dtype=np.float64)
    cap: list = []
    with no_grad():
        t0 = time.perf_counter()
        ddetr_attention(x, dd, capture=cap)
        t1 = time.perf_counter()
        dmha_forward(x, dm, capture=cap)
        t2 = time.perf_counter()
    rd, rm = cap
    ns = rm["points"].shape[2]
    enum_dd = rd["points"].size // 2 * (c // m) + rd["points"].size + rd["attention"].size + 2 * h * h * c
    enum_dm = 2 * h * h * c + 4 * ns * c + rm["offsets"].size + 2 * rm["attention"].size
    ana_dd = ddetr_layer_cost(h, h, c, m, k).activation_elements
    ana_dm = dmha_layer_cost(h, h, c, m, ns).activation_elements
    micro = {"shape": [h, h, c, m], "K": k, "dat_keys": ns,
             "ddetr": {"enumerated": enum_dd, "analyzer": ana_dd},
             "dat": {"enumerated": enum_dm, "analyzer": ana_dm},
             "match": enum_dd == ana_dd and enum_dm == ana_dm}
    result = {"stage3": [H, H, C, M], "rows": rows, "micro_enumeration": micro}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare_ddetr.json").write_text(json.dumps(result, indent=2) + "\n")
    if args.format == "json":
        _emit(json.dumps(result, indent=2))
    else:
        head = f"{'attn':8} {'keys':>9} {'GFLOPs':>9} {'params':>10} {'activations':>12}"
        _emit(head)
        for r in rows:
            for name, kk, rec in (("D-DETR", r["ddetr_keys"], r["ddetr"]), ("DAT", r["dat_keys"], r["dat"])):
                _emit(f"{name:8} {'/'.join(map(str, kk)):>9} {rec['flops'] / 1e9:9.3f} "
                      f"{rec['params_learnable']:>10,} {rec['activation_elements']:>12,}")
            _emit(f"{'ratio':8} {'':>9} {r['flops_ratio']:9.2f} {'':>10} {r['activation_ratio']:12.2f}")
        _emit(f"micro enumeration matches analyzer: {micro['match']}")
    _emit(f"micro forward timing (not saved): ddetr {1e3 * (t1 - t0):.2f} ms, "
          f"dmha {1e3 * (t2 - t1):.2f} ms")
    return 0 if micro["match"] else 1


# -- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="datkit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="FLOPs / parameter / activation report")
    _add_model_flags(p, "T")
    _common(p, "datkit-out/analyze")
    p.add_argument("--input", type=int, help="input resolution (square)")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="float64 finite-difference battery")
    _common(p, "datkit-out/gradcheck")
    p.add_argument("--op", action="append", help="check name(s), comma-separated; repeatable")
    p.add_argument("--tol", type=float, default=None, help="max relative error (default 1e-4)")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train", help="toy training run of the micro model")
    _add_model_flags(p, "micro")
    _common(p, "datkit-out/train")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--eval-every", type=int, default=25)
    p.add_argument("--samples-per-class", type=int, default=100)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--dataset", help="cached dataset file to load instead of generating")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("viz", help="SVG overlays of sampling points and attention")
    _common(p, "datkit-out/viz")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--max-radius", type=float, default=12.0)
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("compare-ddetr", help="per-query vs shared sampling costs")
    _common(p, "datkit-out/compare")
    p.add_argument("--keys", default="16,49,196", help="comma-separated stage-3 key counts")
    p.add_argument("--H", type=int, default=14, help="stage-3 map size")
    p.add_argument("--C", type=int, default=384, help="stage-3 channels")
    p.add_argument("--M", type=int, default=12, help="stage-3 heads")
    p.add_argument("--depth3", type=int, default=3)
    p.add_argument("--depth4", type=int, default=1)
    p.set_defaults(fn=cmd_compare_ddetr)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ParameterError, DimensionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
