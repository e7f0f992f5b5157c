"""Command-line entry point: ``sandwich-dit <command> [--config run.json] [flags]``.

Every command resolves one JSON run configuration (defaults, then the config file, then flags),
writes its outputs under ``--out`` and records the resolved configuration plus output digests in
``manifest.json``.

Exit codes: 0 ok, 1 unexpected error, 2 configuration error, 3 infeasible budget,
4 failed check, 5 non-finite values.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attention.blocks import BlockContext, LchaAttention, SsaConfig, lcha_block, ssa_block
from .attention.grid import TokenGrid
from .attention.kernels import linear_attention, linear_attention_map
from .diffusion.kd import (
    CacheFormatError,
    build_kd_cache,
    distill,
    read_kd_cache,
    velocity_fn,
)
from .numerics.gradcheck import check_registered_ops
from .numerics.io import load_checkpoint, save_checkpoint, save_tensor
from .numerics.rng import Rng
from .numerics.tensor import NonFiniteError, Tensor, no_grad
from .sandwich.allocate import InfeasibleBudget
from .sandwich.check import group_grad_check
from .sandwich.layout import SandwichLayout
from .sandwich.model import DiT, ModelConfig, build_sandwich, build_teacher
from .sandwich.search import SearchSchedule, layout_from_search, plan_groups, search
from .streaming.engine import ChunkPlan, StreamEngine, max_relative_deviation, offline_generate, route_blocks
from .streaming.footprint import cache_footprint
from .streaming.latency import ProfileError, load_profile, parse_profile

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_CHECK, EXIT_NONFINITE = 0, 1, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class CheckFailure(RuntimeError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "dtype": "f64",
    "out": None,
    "model": ModelConfig().to_dict(),
    "data": {"frames": 3, "height": 4, "width": 4, "chunk_frames": 3},
    "profile": None,
    "layout": None,
    "weights": None,
    "search": {"steps": 60, "lr_logits": 0.2, "lr_weights": 1e-3, "tau_start": 1.0, "tau_end": 0.1,
               "train_weights": True, "legal_samples": True, "mask_samples": 1, "planted": None},
    "stream": {"chunks": 4, "window": 2, "frames_per_chunk": 3, "steps": 4, "oracle": False, "tol": 1e-5},
    "cache": {"tuples": 512, "sampler": "uniform", "two_expert": False, "boundary": 0.5, "teacher_seed": 0},
    "distill": {"cache": None, "steps": 200, "batch_size": 4, "lr": 3e-3, "student": "sandwich",
                "student_seed": 1, "mask": None},
    "grad_check": {"tol": 1e-4, "seeds": 16},
    "attn": {"frames": 2, "height": 4, "width": 4, "max_tokens": 4096, "rope": False, "causal": False,
             "block": None, "tol": 1e-5},
    "bench": {"repeats": 3},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[key], dict) and key != "model":
            if not isinstance(value, dict):
                raise ConfigError(f"config field {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        elif key == "model":
            if not isinstance(value, dict):
                raise ConfigError("config field 'model' must be an object")
            merged = dict(base[key])
            merged.update(value)
            out[key] = merged
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        if "command" in raw and isinstance(raw.get("config"), dict):
            raw = raw["config"]   # a previous run's manifest
        cfg = _merge(cfg, raw)
    for flag in ("seed", "dtype", "out", "layout", "weights", "profile"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[flag] = value
    section = {"search": "search", "stream-sim": "stream", "distill": "distill"}.get(args.command)
    if getattr(args, "steps", None) is not None and section:
        cfg[section]["steps"] = args.steps
    if getattr(args, "chunks", None) is not None:
        cfg["stream"]["chunks"] = args.chunks
    if getattr(args, "window", None) is not None:
        cfg["stream"]["window"] = None if args.window.lower() in ("none", "inf") else _int(args.window, "--window")
    if getattr(args, "oracle", False):
        cfg["stream"]["oracle"] = True
    if getattr(args, "cache", None) is not None:
        cfg["distill"]["cache"] = args.cache
    if cfg["dtype"] not in ("f32", "f64"):
        raise ConfigError(f"config field 'dtype' must be 'f32' or 'f64', got {cfg['dtype']!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError(f"config field 'seed' must be an integer, got {cfg['seed']!r}")
    if cfg["out"] is None:
        cfg["out"] = str(Path("runs") / args.command)
    return cfg


def _int(text: str, name: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"{name} expects an integer or 'none', got {text!r}") from None


def _model_config(d: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad 'model' config: {e}") from None


def _dtype(cfg: dict):
    return np.float32 if cfg["dtype"] == "f32" else np.float64


def _cast(model, dtype) -> None:
    if dtype == np.float64:
        return
    for p in model.parameters():
        p.data = p.data.astype(dtype)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_manifest(out: Path, command: str, cfg: dict, outputs: dict[str, Path], results: dict) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "outputs": {name: {"path": str(p.relative_to(out)) if p.is_relative_to(out) else str(p),
                           "sha256": _digest(p) if p.is_file() else None} for name, p in outputs.items()},
        "results": results,
    }
    return _write_json(out / "manifest.json", manifest)


def _load_layout(cfg: dict) -> SandwichLayout:
    if not cfg["layout"]:
        raise ConfigError("this command needs a layout file (config 'layout' or --layout)")
    try:
        return SandwichLayout.load(cfg["layout"])
    except FileNotFoundError:
        raise ConfigError(f"layout file {cfg['layout']} not found") from None
    except (ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad layout file {cfg['layout']}: {e}") from None


def _model_from_layout(cfg: dict, layout: SandwichLayout) -> DiT:
    mcfg = _model_config({**cfg["model"], **(layout.block_configs or {})})
    if mcfg.groups != layout.groups or mcfg.group_size != layout.group_size:
        raise ConfigError(f"layout has M={layout.groups}, k_g={layout.group_size} but model config has "
                          f"groups={mcfg.groups}, group_size={mcfg.group_size}")
    model = build_sandwich(mcfg, cfg["seed"], mask=layout.mask)
    if cfg["weights"]:
        try:
            state = load_checkpoint(cfg["weights"])
        except FileNotFoundError:
            raise ConfigError(f"weights directory {cfg['weights']} has no manifest") from None
        try:
            model.load_state_dict(state)
        except (KeyError, ValueError) as e:
            raise ConfigError(f"weights do not match the layout: {e}") from None
    return model


def _profile(cfg: dict):
    src = cfg["profile"]
    if src is None:
        raise ConfigError("this command needs a device profile (config 'profile' or --profile)")
    if isinstance(src, dict):
        return parse_profile(src)
    try:
        return load_profile(src)
    except FileNotFoundError:
        raise ConfigError(f"device profile {src} not found") from None


def _batches(mcfg: ModelConfig, data: dict, seed: int):
    rng = Rng(seed).child("search-data")
    grid_len = data["frames"] * data["height"] * data["width"]
    ctx = BlockContext(_grid(mcfg, data), causal=True, chunk_frames=data["chunk_frames"])
    while True:
        yield (Tensor(rng.normal((grid_len, mcfg.in_channels))), float(rng.uniform()),
               rng.normal(mcfg.text_dim), ctx)


def _grid(mcfg: ModelConfig, data: dict) -> TokenGrid:
    return TokenGrid(data["frames"], data["height"], data["width"], mcfg.width)


# -- commands ------------------------------------------------------------------

def cmd_search(cfg: dict, out: Path) -> dict:
    profile = _profile(cfg)
    mcfg = _model_config(cfg["model"])
    allocation, M, k = plan_groups(profile.budget, mcfg.group_size)
    mcfg = ModelConfig.from_dict({**mcfg.to_dict(), "groups": M})
    s = cfg["search"]
    schedule = SearchSchedule(steps=int(s["steps"]), lr_logits=s["lr_logits"], lr_weights=s["lr_weights"],
                              tau_start=s["tau_start"], tau_end=s["tau_end"], train_weights=s["train_weights"],
                              legal_samples=s["legal_samples"], mask_samples=int(s["mask_samples"]))
    planted = s.get("planted")
    if planted:
        mask = tuple(planted["mask"])
        if len(mask) != M or sum(mask[1:-1]) != k:
            raise ConfigError(f"planted mask {list(mask)} is not a legal M={M}, k={k} mask for this budget")
        pseed = int(planted.get("seed", cfg["seed"]))
        teacher = build_sandwich(mcfg, pseed, mask=mask)
        student = build_sandwich(mcfg, pseed)
        student.load_state_dict(teacher.state_dict())
    else:
        teacher = build_teacher(mcfg, cfg["seed"])
        student = build_sandwich(mcfg, cfg["seed"], teacher=teacher)
    result = search(student, teacher, _batches(mcfg, cfg["data"], cfg["seed"]), k, schedule,
                    Rng(cfg["seed"]).child("gumbel"))
    student.body.set_mask(result.mask)
    layout = layout_from_search(result, mcfg.group_size, mcfg.to_dict(), profile.budget, allocation, schedule,
                                cfg["seed"])
    layout.save(out / "layout.json")
    save_checkpoint(out / "weights", student.state_dict())
    report = {"allocation": allocation.to_dict(), "groups": M, "k": k, "mask": list(result.mask),
              "candidates": result.candidates, "achieved": {"latency_ms": allocation.latency,
                                                            "memory_mb": allocation.memory},
              "final_loss": result.losses[-1] if result.losses else None,
              "layout_digest": layout.digest()}
    if planted:
        report["planted_mask"] = list(planted["mask"])
        report["recovered"] = list(result.mask) == list(planted["mask"])
    print(f"allocation N_LCHA={allocation.n_lcha} N_SSA={allocation.n_ssa} "
          f"(L={allocation.latency:g} ms, M={allocation.memory:g} MB); groups M={M}, k={k}")
    print(f"mask {list(result.mask)} from {result.candidates} candidate(s)")
    _write_json(out / "search_report.json", report)
    return {"outputs": {"layout": out / "layout.json", "weights": out / "weights" / "manifest.json",
                        "report": out / "search_report.json"}, "results": report}


def _time_block(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def cmd_bench(cfg: dict, out: Path) -> dict:
    layout = _load_layout(cfg)
    model = _model_from_layout(cfg, layout)
    mcfg = model.cfg
    data = cfg["data"]
    grid = _grid(mcfg, data)
    rng = Rng(cfg["seed"]).child("bench")
    x = Tensor(rng.normal((grid.length, mcfg.width)))
    cond = Tensor(rng.normal((grid.frames, mcfg.cond_dim)))
    repeats = int(cfg["bench"]["repeats"])
    lcha = lcha_block(mcfg.lcha(), mcfg.cond_dim, rng.child("lcha"))
    ssa = ssa_block(SsaConfig(mcfg.width, mcfg.heads, mcfg.head_dim, mcfg.stride, mcfg.inner_low_width),
                    mcfg.cond_dim, rng.child("ssa"))

    def measure(name_block):
        name, block = name_block
        stats: dict = {}
        ctx = BlockContext(grid, causal=True, chunk_frames=data["chunk_frames"], stats=stats)
        with no_grad():
            block(x, cond, ctx)
            counted = dict(stats)
            ms = _time_block(lambda: block(x, cond, BlockContext(grid, True, data["chunk_frames"])), repeats)
        return name, {"ms": ms, "attention_tokens": counted.get(name, 0), "input_tokens": grid.length}

    threads = max(1, int(os.environ.get("S2DIT_THREADS", "1")))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = dict(pool.map(measure, [("lcha", lcha), ("ssa", ssa)]))
    stats: dict = {}
    x_in = Tensor(rng.normal((grid.length, mcfg.in_channels)))
    c_text = rng.normal(mcfg.text_dim)
    with no_grad():
        model(x_in, 0.5, c_text, BlockContext(grid, True, data["chunk_frames"], stats=stats))
        e2e = _time_block(lambda: model(x_in, 0.5, c_text, BlockContext(grid, True, data["chunk_frames"])),
                          repeats)
    rows["model"] = {"ms": e2e, "attention_tokens": stats, "input_tokens": grid.length}
    projection = None
    if cfg["profile"] is not None:
        prof = _profile(cfg)
        if prof.components is not None:
            chunk_ms, fps = prof.components.project()
            projection = {"chunk_ms": chunk_ms, "fps": fps, "fps_1dp": round(fps, 1)}
    print(f"{'block':<8s} {'wall ms':>10s} {'attn tokens':>12s}")
    for name in ("lcha", "ssa"):
        print(f"{name:<8s} {rows[name]['ms']:>10.3f} {rows[name]['attention_tokens']:>12d}")
    print(f"{'model':<8s} {e2e:>10.3f} {json.dumps(stats)}")
    if projection:
        print(f"projection: {projection['chunk_ms']:g} ms per chunk, {projection['fps_1dp']} FPS")
    ratio = rows["lcha"]["attention_tokens"] / max(rows["ssa"]["attention_tokens"], 1)
    results = {"blocks": rows, "token_ratio_lcha_over_ssa": ratio, "projection": projection, "threads": threads}
    _write_json(out / "bench.json", results)
    return {"outputs": {"bench": out / "bench.json"}, "results": results}


def cmd_stream_sim(cfg: dict, out: Path) -> dict:
    layout = _load_layout(cfg)
    model = _model_from_layout(cfg, layout)
    dtype = _dtype(cfg)
    _cast(model, dtype)
    s = cfg["stream"]
    data = cfg["data"]
    plan = ChunkPlan(int(s["frames_per_chunk"]), int(s["steps"]), data["height"], data["width"], int(s["chunks"]))
    rng = Rng(cfg["seed"]).child("stream")
    c_text = rng.normal(model.cfg.text_dim, dtype=dtype)
    noises = [rng.normal((plan.frames_per_chunk, plan.height, plan.width, model.cfg.in_channels), dtype=dtype)
              for _ in range(plan.chunks)]
    engine = StreamEngine(model, plan, window=s["window"])
    outputs = {}
    latents = []
    for i, noise in enumerate(noises):
        lat = engine.stream_step(noise, c_text)
        latents.append(lat)
        path = out / f"chunk_{i:03d}.s2tn"
        save_tensor(path, lat.astype(dtype))
        outputs[f"chunk_{i:03d}"] = path
    per_chunk = [{"chunk": r.index, "seconds": r.seconds, "cache_bytes": r.cache_bytes, "lin_tokens": r.lin_tokens}
                 for r in engine.records]
    flat = len({(r.cache_bytes["lin"], r.cache_bytes["conv"]) for r in engine.records}) <= 1
    analytic = cache_footprint(model.cfg, layout.mask, plan, s["window"])
    results = {"plan": plan.to_dict(), "window": s["window"], "layout_digest": layout.digest(),
               "per_chunk": per_chunk, "lin_conv_bytes_flat": flat, "high_water": engine.high_water,
               "footprint": analytic.to_dict()}
    if s["oracle"]:
        ref = offline_generate(model, plan, noises, c_text)
        dev = max_relative_deviation(latents, ref)
        results["oracle_max_rel_dev"] = dev
        exact_window = s["window"] is None or s["window"] >= plan.chunks
        print(f"oracle max relative deviation {dev:.3e}")
        if exact_window and dev > float(s["tol"]):
            _write_json(out / "stream_report.json", results)
            raise CheckFailure(f"streaming deviates from the offline reference by {dev:.3e} > {s['tol']:g}")
    print(f"{plan.chunks} chunk(s); cache bytes lin={engine.high_water['lin']} conv={engine.high_water['conv']} "
          f"kv={engine.high_water['kv']}")
    _write_json(out / "stream_report.json", results)
    outputs["report"] = out / "stream_report.json"
    return {"outputs": outputs, "results": results}


def cmd_build_cache(cfg: dict, out: Path) -> dict:
    mcfg = _model_config(cfg["model"])
    c = cfg["cache"]
    data = cfg["data"]
    tseed = int(c["teacher_seed"])
    if c["two_expert"]:
        teacher = {"high": velocity_fn(build_teacher(mcfg, tseed)), "low": velocity_fn(build_teacher(mcfg, tseed + 1))}
    else:
        teacher = velocity_fn(build_teacher(mcfg, tseed))
    rng = Rng(cfg["seed"]).child("cache-data")
    shape = (data["frames"], data["height"], data["width"], mcfg.in_channels)
    samples = [(rng.normal(shape), rng.normal(mcfg.text_dim)) for _ in range(int(c["tuples"]))]
    path = out / "cache.s2kd"
    records = build_kd_cache(teacher, samples, Rng(cfg["seed"]).child("cache-noise"), path,
                             sampler=c["sampler"], boundary=float(c["boundary"]))
    bad = [i for i, r in enumerate(records) if not r.check_interpolant()]
    if bad:
        raise CheckFailure(f"{len(bad)} cached x_t values do not match (1-t) x0 + t eps")
    tags = {t: sum(r.tag == t for r in records) for t in ("single", "high", "low")}
    print(f"cached {len(records)} tuples to {path} ({tags})")
    results = {"tuples": len(records), "tags": tags, "teacher_seed": tseed, "shape": list(shape)}
    return {"outputs": {"cache": path}, "results": results}


def cmd_distill(cfg: dict, out: Path) -> dict:
    d = cfg["distill"]
    if not d["cache"]:
        raise ConfigError("distill needs a KD cache (config 'distill.cache' or --cache)")
    try:
        records = read_kd_cache(d["cache"])
    except FileNotFoundError:
        raise ConfigError(f"KD cache {d['cache']} not found") from None
    except CacheFormatError as e:
        raise ConfigError(str(e)) from None
    if not records:
        raise ConfigError(f"KD cache {d['cache']} is empty")
    mcfg = _model_config(cfg["model"])
    r0 = records[0]
    if r0.x_t.ndim != 4 or r0.x_t.shape[-1] != mcfg.in_channels or r0.c_text.shape != (mcfg.text_dim,):
        raise ConfigError(f"cache tuples (x_t {r0.x_t.shape}, c_text {r0.c_text.shape}) do not fit the student "
                          f"(in_channels={mcfg.in_channels}, text_dim={mcfg.text_dim})")
    if d["student"] == "teacher":
        student = build_teacher(mcfg, int(d.get("teacher_seed", cfg["cache"]["teacher_seed"])))
    elif d["student"] == "full":
        student = build_teacher(mcfg, int(d["student_seed"]))
    elif d["student"] == "sandwich":
        mask = tuple(d["mask"]) if d["mask"] else (1,) + (0,) * (mcfg.groups - 2) + (1,)
        student = build_sandwich(mcfg, int(d["student_seed"]), mask=mask)
    else:
        raise ConfigError(f"config field 'distill.student' must be 'sandwich', 'full' or 'teacher', got {d['student']!r}")
    result = distill(student, velocity_fn(student, grad=True), records, steps=int(d["steps"]),
                     batch_size=int(d["batch_size"]), lr=float(d["lr"]), rng=Rng(cfg["seed"]).child("distill"))
    save_checkpoint(out / "student", student.state_dict())
    curve = {"curve": result.curve, "eval_before": result.eval_before, "eval_after": result.eval_after}
    _write_json(out / "loss_curve.json", curve)
    ratio = result.eval_after / result.eval_before if result.eval_before > 0 else 0.0
    print(f"kd_loss over the cache: {result.eval_before:.6g} -> {result.eval_after:.6g} (ratio {ratio:.3f})")
    results = {"eval_before": result.eval_before, "eval_after": result.eval_after, "ratio": ratio,
               "steps": int(d["steps"]), "tuples": len(records)}
    return {"outputs": {"loss_curve": out / "loss_curve.json", "student": out / "student" / "manifest.json"},
            "results": results}


def cmd_grad_check(cfg: dict, out: Path) -> dict:
    if cfg["dtype"] == "f32":
        warnings.warn("gradient checks need float64; running the f32 request in float64", RuntimeWarning,
                      stacklevel=2)
        print("warning: float32 requested, gradient checks run in float64")
    g = cfg["grad_check"]
    tol = float(g["tol"])
    reports = check_registered_ops(tol=tol, seeds=range(int(g["seeds"])))
    reports.append(group_grad_check(tol=tol, seed=cfg["seed"]))
    for r in reports:
        print(r.line())
    table = [{"name": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in reports]
    _write_json(out / "grad_check.json", table)
    failed = [f"{r.name} ({r.max_rel_error:.3e})" for r in reports if not r.passed]
    results = {"checked": len(reports), "failed": failed, "tol": tol, "checked_dtype": "f64"}
    if failed:
        raise CheckFailure(f"gradient check failed for: {', '.join(failed)}")
    return {"outputs": {"table": out / "grad_check.json"}, "results": results}


def cmd_attn_dump(cfg: dict, out: Path) -> dict:
    a = cfg["attn"]
    if cfg["layout"]:
        model = _model_from_layout(cfg, _load_layout(cfg))
        mcfg = model.cfg
        blocks = [b for b, _ in route_blocks(model) if isinstance(b.mixer, LchaAttention)]
        if a["block"]:
            blocks = [b for b in blocks if b.key == a["block"]]
        if not blocks:
            raise ConfigError(f"no LCHA block {a['block'] or ''} on the layout's route".replace("  ", " "))
        block = blocks[0]
    else:
        mcfg = _model_config(cfg["model"])
        block = lcha_block(mcfg.lcha(), mcfg.cond_dim, Rng(cfg["seed"]).child("attn-block"), key="L0.0")
    mixer = block.mixer
    grid = _grid(mcfg, a)
    if grid.length > int(a["max_tokens"]):
        raise ConfigError(f"attention map of L={grid.length} tokens exceeds attn.max_tokens={a['max_tokens']}")
    h = Tensor(Rng(cfg["seed"]).child("attn-input").normal((grid.length, mcfg.width)))
    q, k, v = mixer.qkv(h)
    positions = grid.positions() if a["rope"] and mixer.cfg.rope else None
    segments = grid.chunk_segments(cfg["data"]["chunk_frames"]) if a["causal"] else None
    amap = linear_attention_map(q, k, mixer.kernel, positions=positions, causal=a["causal"], segments=segments,
                                eps=mixer.cfg.eps, rope_base=mixer.cfg.rope_base)
    ref = linear_attention(q, k, v, mixer.kernel, positions=positions, causal=a["causal"], segments=segments,
                           eps=mixer.cfg.eps, rope_base=mixer.cfg.rope_base).data
    recon = np.einsum("hij,hjd->hid", amap, v.data)
    recon_err = float(np.max(np.abs(recon - ref)) / max(np.max(np.abs(ref)), 1e-30))
    outputs = {"input": out / "input.s2tn"}
    save_tensor(out / "input.s2tn", h.data)
    for i in range(amap.shape[0]):
        path = out / f"head_{i}.s2tn"
        save_tensor(path, amap[i])
        outputs[f"head_{i}"] = path
    row_sums = amap.sum(axis=-1)
    results = {"tokens": grid.length, "heads": int(amap.shape[0]), "block": block.key, "rope": positions is not None,
               "reconstruction_rel_err": recon_err, "row_sum_min": float(row_sums.min()),
               "row_sum_max": float(row_sums.max())}
    print(f"dumped {amap.shape[0]} map(s) of {grid.length}x{grid.length}; reconstruction error {recon_err:.2e}")
    if recon_err > float(a["tol"]):
        raise CheckFailure(f"dumped map does not reproduce the attention output ({recon_err:.3e})")
    return {"outputs": outputs, "results": results}


COMMANDS = {
    "search": cmd_search,
    "bench": cmd_bench,
    "stream-sim": cmd_stream_sim,
    "distill": cmd_distill,
    "grad-check": cmd_grad_check,
    "attn-dump": cmd_attn_dump,
    "build-cache": cmd_build_cache,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sandwich-dit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--dtype", choices=["f32", "f64"])
        p.add_argument("--out", help="output directory")
        if name in ("bench", "stream-sim", "attn-dump"):
            p.add_argument("--layout")
            p.add_argument("--weights", help="checkpoint directory")
        if name in ("search", "bench"):
            p.add_argument("--profile", help="device profile JSON")
        if name in ("search", "stream-sim", "distill"):
            p.add_argument("--steps", type=int)
        if name == "stream-sim":
            p.add_argument("--chunks", type=int)
            p.add_argument("--window", help="SSA KV window in chunks, or 'none'")
            p.add_argument("--oracle", action="store_true", help="compare against the offline causal forward")
        if name == "distill":
            p.add_argument("--cache", help="KD cache file")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        outcome = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, outcome["outputs"], outcome["results"])
        return EXIT_OK
    except (ConfigError, ProfileError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBudget as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except CheckFailure as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except NonFiniteError as e:
        print(f"non-finite: {e}", file=sys.stderr)
        return EXIT_NONFINITE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
