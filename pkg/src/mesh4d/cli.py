"""Command-line entry point: ``mesh4d <subcommand> ...``.

Every run writes the fully resolved configuration next to its output so it
can be replayed. Exit codes: 0 success, 2 validation failure, 3 numeric
failure. ``MESH4D_THREADS`` sets the torch thread count (default 1).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import io
from .config import FlowConfig, VaeConfig, apply_overrides, parse_value, read_kv_file
from .errors import NumericError, ValidationError
from .mesh_core import MeshSequence, denormalize_points, normalize_sequence
from .synth import OrthoCamera, SynthSample, make_sample, render_silhouette

log = logging.getLogger("mesh4d")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "MESH4D_THREADS"


# ---------------------------------------------------------------- helpers

def _setup(args) -> None:
    threads = int(os.environ.get(THREADS_ENV, "1"))
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def _dtype(args):
    return torch.float64 if getattr(args, "precision", 32) == 64 else torch.float32


def _overrides(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def _resolve(base, args) -> object:
    """Defaults <- config file <- explicit --set flags."""
    cfg = base
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, read_kv_file(args.config))
    cfg = apply_overrides(cfg, _overrides(getattr(args, "set", None)))
    cfg.validate()
    return cfg


def _write_resolved(path, command: str, args, **configs) -> None:
    record = {"command": command, "threads": torch.get_num_threads(),
              "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}}
    for name, cfg in configs.items():
        record[name] = asdict(cfg) if cfg is not None and hasattr(cfg, "__dataclass_fields__") else cfg
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True, default=str))


def _config_path(out) -> Path:
    out = Path(out)
    return out / "resolved_config.json" if out.is_dir() else Path(str(out) + ".config.json")


def load_samples(data_dir, split: str = "train") -> list[SynthSample]:
    d = Path(data_dir)
    manifest = io.read_manifest(d / "manifest.json")
    out = []
    for name in manifest[split]:
        item = io.read_m4ds(d / name)
        if item.skeleton is None:
            raise ValidationError(f"{name}: training samples need a skeleton block")
        out.append(SynthSample(item.sequence, item.skeleton, item.weights, OrthoCamera(), item.identifier or name))
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ValidationError(f"{out} is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = args.bones
    names = {"train": [], "test": []}
    seeds = {"train": [args.seed + i for i in range(args.count)],
             "test": [args.test_seed + i for i in range(args.test_count)]}
    for split in ("train", "test"):
        for s in seeds[split]:
            sample = make_sample(s, args.frames, (lo, hi))
            sample.validate()
            name = f"{split}_{s:06d}.m4ds"
            io.write_m4ds(out / name, sample.sequence, sample.skeleton, sample.weights, sample.identifier)
            names[split].append(name)
    io.write_manifest(out / "manifest.json", names["train"], names["test"],
                      {**seeds, "frames": args.frames, "bones": [lo, hi]})
    _write_resolved(out / "resolved_config.json", "gen-data", args)
    print(json.dumps({"written": len(names["train"]) + len(names["test"]), "out": str(out)}))
    return EXIT_OK


def cmd_train_vae(args) -> int:
    from .vae_train import load_state, new_state, save_state, train_vae

    if args.resume:
        state, cfg, _ = load_state(args.resume, _dtype(args))
        if args.config or args.set:
            cfg = _resolve(cfg, args)
            state.model.cfg = cfg
    else:
        cfg = _resolve(VaeConfig.toy(), args)
        state = new_state(cfg, args.seed, _dtype(args))
    data = load_samples(args.data)
    if args.fixed_windows:
        from .synth import evaluation_window

        data = [evaluation_window(s, cfg.T, args.seed) for s in data]
    log_file = args.log or str(args.out) + ".log.jsonl"
    train_vae(data, cfg, args.steps, args.seed, state, log_file=log_file)
    save_state(args.out, state, cfg, {"data": str(args.data)})
    _write_resolved(_config_path(args.out), "train-vae", args, vae_config=cfg)
    print(json.dumps({"checkpoint": str(args.out), "step": state.step, "final_loss": state.log[-1]["loss"]
                      if state.log else None}))
    return EXIT_OK


def _load_vae(path, dtype):
    from .vae_train import load_state

    state, cfg, meta = load_state(path, dtype)
    if meta.get("kind") != "vae":
        raise ValidationError(f"{path} is not a VAE checkpoint")
    state.model.eval()
    return state.model, cfg


def _window(seq: MeshSequence, T: int, start: int, stride: int) -> MeshSequence:
    idx = start + stride * np.arange(T)
    if idx[-1] >= seq.T:
        raise ValidationError(f"window start={start} stride={stride} needs {idx[-1] + 1} frames, have {seq.T}")
    return MeshSequence(seq.faces, seq.frames[idx])


def cmd_encode(args) -> int:
    model, cfg = _load_vae(args.checkpoint, _dtype(args))
    item = io.read_m4ds(args.input)
    if item.skeleton is None:
        raise ValidationError(f"{args.input}: encoding needs a skeleton block")
    idx = args.start + args.stride * np.arange(cfg.T)
    seq = _window(item.sequence, cfg.T, args.start, args.stride)
    norm, scale, center = normalize_sequence(seq)
    skel = item.skeleton.frames(idx).transformed(scale, center)
    latent = model.encode_sequence(norm, skel, item.weights, args.seed)
    io.write_latent(args.out, {"mean": latent.mean, "log_variance": latent.log_variance,
                               "sample": latent.sample, "fps_positions": latent.fps_positions},
                    {"scale": scale, "center": center.tolist(), "frames": idx.tolist(), "seed": args.seed})
    _write_resolved(_config_path(args.out), "encode", args, vae_config=cfg)
    return EXIT_OK


def cmd_decode(args) -> int:
    model, cfg = _load_vae(args.checkpoint, _dtype(args))
    arrays, meta = io.read_latent(args.latent)
    key = "mean" if args.use_mean else "sample"
    z = arrays[key]
    if z.shape[1:] != (cfg.N, cfg.c_o) or z.shape[0] != cfg.T:
        raise ValidationError(f"latent shape {z.shape} does not match checkpoint ({cfg.T}, {cfg.N}, {cfg.c_o})")
    canonical = io.read_m4ds(args.canonical).sequence.mesh(args.frame)
    if "scale" in meta:
        scale, center = meta["scale"], np.asarray(meta["center"])
    else:
        _, scale, center = normalize_sequence(MeshSequence(canonical.faces, canonical.vertices[None]))
    verts = (canonical.vertices - center) * scale
    disp = model.decode_field(z, verts)
    disp[0] = 0.0
    frames = denormalize_points(verts[None] + disp, scale, center)
    out_seq = MeshSequence(canonical.faces, frames)
    if not np.all(np.isfinite(out_seq.frames)):
        raise NumericError("decoded sequence contains non-finite values")
    io.write_m4ds(args.out, out_seq)
    _write_resolved(_config_path(args.out), "decode", args, vae_config=cfg)
    return EXIT_OK


def cmd_train_flow(args) -> int:
    from .flow import load_flow, make_flow_dataset, new_flow_state, save_flow, train_flow

    vae, vcfg = _load_vae(args.vae, _dtype(args))
    for p in vae.parameters():
        p.requires_grad_(False)
    data = load_samples(args.data)
    if args.resume:
        state, fcfg, _, _ = load_flow(args.resume, _dtype(args))
        fcfg = _resolve(fcfg, args)
    else:
        fcfg = _resolve(FlowConfig.toy(), args)
    ds = make_flow_dataset(vae, data, fcfg, args.windows_per_sample, args.seed, _dtype(args))
    if not args.resume:
        state = new_flow_state(fcfg, vcfg, args.seed, None if args.no_pretrained_init else vae,
                               ds.latent_scale, _dtype(args))
    log_file = args.log or str(args.out) + ".log.jsonl"
    train_flow(ds, fcfg, args.steps, args.seed, state, log_file=log_file)
    save_flow(args.out, state, fcfg, vcfg, {"vae_checkpoint": str(args.vae)})
    _write_resolved(_config_path(args.out), "train-flow", args, flow_config=fcfg, vae_config=vcfg)
    print(json.dumps({"checkpoint": str(args.out), "step": state.step,
                      "final_loss": state.log[-1]["loss"] if state.log else None}))
    return EXIT_OK


def _condition_frames(args, T: int):
    if args.features:
        return np.load(args.features)
    if not args.frames:
        raise ValidationError("sample needs --frames DIR (PGM silhouettes) or --features FILE")
    files = sorted(Path(args.frames).glob("*.pgm"))
    if len(files) < T:
        raise ValidationError(f"{args.frames}: found {len(files)} silhouettes, need {T}")
    return [io.read_pgm(f) for f in files[:T]]


def cmd_sample(args) -> int:
    from .flow import load_flow, sample_sequence
    from .metrics import EvalConfig, evaluate_sequence

    state, fcfg, vcfg, meta = load_flow(args.flow, _dtype(args))
    vae_path = args.vae or meta.get("vae_checkpoint")
    if not vae_path:
        raise ValidationError("no VAE checkpoint given and none recorded in the flow checkpoint")
    vae, _ = _load_vae(vae_path, _dtype(args))
    canonical = io.read_m4ds(args.canonical).sequence.mesh(args.frame)
    _, scale, center = normalize_sequence(MeshSequence(canonical.faces, canonical.vertices[None]))
    norm_canonical = type(canonical)((canonical.vertices - center) * scale, canonical.faces)
    frames = _condition_frames(args, vcfg.T)
    seq = sample_sequence(vae, state, norm_canonical, frames, fcfg, args.seed, args.steps, args.cfg_weight)
    out_seq = MeshSequence(seq.faces, denormalize_points(seq.frames, scale, center))
    if not np.all(np.isfinite(out_seq.frames)):
        raise NumericError("sampled sequence contains non-finite values")
    io.write_m4ds(args.out, out_seq)
    result = {"output": str(args.out), "sha256": _sha256(args.out), "cfg_weight": args.cfg_weight,
              "steps": args.steps}
    if args.gt:
        gt = _window(io.read_m4ds(args.gt).sequence, vcfg.T, args.gt_start, args.gt_stride)
        metrics = evaluate_sequence(out_seq, gt, EvalConfig(grid=args.grid, points=args.points, align=False))
        mpath = Path(str(args.out) + ".metrics.json")
        mpath.write_text(metrics.to_json())
        result["metrics"] = str(mpath)
    _write_resolved(_config_path(args.out), "sample", args, flow_config=fcfg, vae_config=vcfg)
    print(json.dumps(result))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import EvalConfig, evaluate_sequence

    pred = io.read_m4ds(args.pred).sequence
    gt = io.read_m4ds(args.gt).sequence
    cfg = EvalConfig(grid=args.grid, points=args.points, align=args.align, outlier_weight=args.outlier_weight,
                     seed=args.seed)
    metrics = evaluate_sequence(pred, gt, cfg)
    text = metrics.to_json()
    if args.out:
        Path(args.out).write_text(text)
        _write_resolved(_config_path(args.out), "evaluate", args, eval_config=cfg)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import relative_error_table, run_gradcheck, sign_flip_detected

    results = run_gradcheck(args.component, args.seed)
    print(relative_error_table(results))
    mutation = sign_flip_detected(args.seed)
    report = {"component": args.component, "suites": [r.to_dict() for r in results],
              "mutation_detected": mutation}
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    if not mutation or not all(r.passed for r in results):
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export(args) -> int:
    item = io.read_m4ds(args.input)
    out = Path(args.out)
    if args.format == "obj":
        io.export_obj_sequence(out, item.sequence, args.fps)
    else:
        out.mkdir(parents=True, exist_ok=True)
        io.write_m4ds(out / Path(args.input).name, item.sequence, item.skeleton, item.weights, item.identifier)
    print(json.dumps({"frames": item.sequence.T, "out": str(out), "format": args.format}))
    return EXIT_OK


def cmd_render(args) -> int:
    item = io.read_m4ds(args.input)
    seq = item.sequence
    if args.frames_per_window:
        seq = _window(seq, args.frames_per_window, args.start, args.stride)
    if args.normalize:
        seq = normalize_sequence(seq)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cam = OrthoCamera(half_extent=args.half_extent)
    for t in range(seq.T):
        io.write_pgm(out / f"frame_{t:04d}.pgm", render_silhouette(seq.mesh(t), cam, args.resolution))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mesh4d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    def add_config(sp):
        sp.add_argument("--config", help="key = value file; explicit --set wins")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE")
        sp.add_argument("--precision", type=int, choices=(32, 64), default=32)

    sp = add("gen-data", cmd_gen_data, "generate a synthetic rig dataset")
    sp.set_defaults(seed=1000)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--test-count", type=int, default=8)
    sp.add_argument("--test-seed", type=int, default=2000)
    sp.add_argument("--frames", type=int, default=24)
    sp.add_argument("--bones", type=int, nargs=2, default=(2, 5))
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")

    sp = add("train-vae", cmd_train_vae, "train the deformation VAE")
    add_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.add_argument("--log")
    sp.add_argument("--fixed-windows", action="store_true", help="train on one fixed window per sample")

    sp = add("encode", cmd_encode, "encode a sequence window to a latent file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--stride", type=int, default=1)
    sp.add_argument("--precision", type=int, choices=(32, 64), default=32)

    sp = add("decode", cmd_decode, "decode a latent onto a canonical mesh")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--latent", required=True)
    sp.add_argument("--canonical", required=True)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--use-mean", action="store_true")
    sp.add_argument("--out", required=True)
    sp.add_argument("--precision", type=int, choices=(32, 64), default=32)

    sp = add("train-flow", cmd_train_flow, "train the flow-matching velocity model")
    add_config(sp)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int, default=200)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume")
    sp.add_argument("--log")
    sp.add_argument("--windows-per-sample", type=int, default=4)
    sp.add_argument("--no-pretrained-init", action="store_true")

    sp = add("sample", cmd_sample, "sample a deformation for a canonical mesh")
    sp.add_argument("--flow", required=True)
    sp.add_argument("--vae")
    sp.add_argument("--canonical", required=True)
    sp.add_argument("--frame", type=int, default=0)
    sp.add_argument("--frames", help="directory of PGM silhouettes (sorted by name)")
    sp.add_argument("--features", help=".npy array (T, F, c_v) of frame features")
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--cfg-weight", type=float, default=None, help="guidance weight; omit to disable")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt", help="ground-truth .m4ds; writes <out>.metrics.json")
    sp.add_argument("--gt-start", type=int, default=0)
    sp.add_argument("--gt-stride", type=int, default=1)
    sp.add_argument("--grid", type=int, default=64)
    sp.add_argument("--points", type=int, default=10000)
    sp.add_argument("--precision", type=int, choices=(32, 64), default=32)

    sp = add("evaluate", cmd_evaluate, "geometry and tracking metrics")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--align", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--grid", type=int, default=64)
    sp.add_argument("--points", type=int, default=10000)
    sp.add_argument("--outlier-weight", type=float, default=0.0)
    sp.add_argument("--out")

    sp = add("gradcheck", cmd_gradcheck, "central-difference gradient checks (float64)")
    sp.add_argument("--component", default="all",
                    choices=("primitives", "encoder", "decoder", "velocity", "all"))
    sp.add_argument("--out")

    sp = add("export", cmd_export, "export a sequence as OBJ frames or a container copy")
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", choices=("obj", "m4ds"), default="obj")
    sp.add_argument("--fps", type=float, default=24.0)
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render binary silhouettes as PGM")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--half-extent", type=float, default=2.0)
    sp.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=True)
    sp.add_argument("--frames-per-window", type=int, default=0)
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--stride", type=int, default=1)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup(args)
    try:
        return args.func(args)
    except ValidationError as e:
        print(json.dumps({"error": "validation", "message": str(e)}), file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as e:
        print(json.dumps({"error": "numeric", "message": str(e)}), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
