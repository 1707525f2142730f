"""Command-line entry points: gen, train, render, eval.

Every command is deterministic given its config and seed, and writes a
run manifest (JSON) on success. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import SCHEMA_VERSION, TrainingConfig, config_to_text, load_config, parse_flat_text
from .errors import CheckpointError, ConfigError, InvalidSpec, MeshsplatError, NonFiniteGradient
from .geometry import DTYPE
from .imgio import save_png_gray, save_png_rgb
from .mesh import SkinnedMesh
from .pipeline import refine_pose_test_time, report_model, run_pipeline
from .scenes import (
    SceneSpec,
    SyntheticDataset,
    generate_dataset,
    load_dataset,
    orbit_camera,
    save_dataset,
)
from .splatting import render_frame

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _write_manifest(out_dir: Path, payload: dict) -> None:
    """Atomic write so a crashed run never leaves a half manifest."""
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True))
    tmp.replace(out_dir / "run_manifest.json")


def scene_spec_from_text(text: str) -> SceneSpec:
    raw = parse_flat_text(text)
    version = raw.pop("schema_version", None)
    if version is None:
        raise ConfigError("missing required key 'schema_version'")
    if int(version) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    fields = {f.name: f.type for f in dataclasses.fields(SceneSpec)}
    values = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown scene spec key '{key}'")
        kind = fields[key]
        if kind == "int":
            values[key] = int(value)
        elif kind == "float":
            values[key] = float(value)
        elif key == "fuzz_regions":
            values[key] = tuple(s.strip() for s in value.split(",") if s.strip())
        else:
            values[key] = value
    spec = SceneSpec(**values)
    spec.validate()
    return spec


def _load_frames(dataset_dir: Path) -> SyntheticDataset:
    if not (dataset_dir / "manifest.json").exists():
        raise InvalidSpec(f"no dataset manifest in {dataset_dir}")
    return load_dataset(dataset_dir)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    spec = scene_spec_from_text(Path(args.spec).read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    ds = generate_dataset(spec)
    save_dataset(ds, out)
    _write_manifest(out, {
        "command": "gen",
        "spec_path": str(args.spec),
        "spec": dataclasses.asdict(spec),
        "out": str(out),
        "seed": spec.seed,
        "wall_clock_sec": {"gen": round(time.time() - t0, 3)},
        "frames": {"train": len(ds.train), "test": len(ds.test)},
    })
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else TrainingConfig()
    config.validate()
    ds = _load_frames(Path(args.dataset))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.echo_config:
        print(config_to_text(config), end="")

    stages = tuple(range(1, args.stages + 1))
    start = None
    if args.resume:
        start = load_checkpoint(args.resume)
        print(f"resuming after stage {start.stage}")

    log_path = out / "train_log.jsonl"
    log_file = log_path.open("a" if args.resume else "w")

    def log_fn(report):
        log_file.write(json.dumps(report.as_log_entry()) + "\n")

    preview_dir = out / "previews"
    preview_dir.mkdir(exist_ok=True)

    def preview_fn(stage, iteration, bundle):
        base = f"s{stage}_{iteration:06d}"
        save_png_rgb(preview_dir / f"{base}_gauss.png", bundle.gauss_rgb)
        save_png_gray(preview_dir / f"{base}_alpha.png", bundle.alpha)
        save_png_rgb(preview_dir / f"{base}_mesh.png", bundle.mesh_rgb)
        depth = bundle.depth
        finite = torch.isfinite(depth)
        if bool(finite.any()):
            lo, hi = float(depth[finite].min()), float(depth[finite].max())
            norm = torch.where(finite, (depth - lo) / max(hi - lo, 1e-9), torch.ones_like(depth))
        else:
            norm = torch.ones_like(depth)
        save_png_gray(preview_dir / f"{base}_depth.png", norm)
        save_png_rgb(preview_dir / f"{base}_final.png", bundle.image)

    timings: dict[str, float] = {}

    def stage_done_fn(stage, ckpt):
        timings[f"stage{stage}"] = round(time.time() - stage_done_fn.t0, 3)
        stage_done_fn.t0 = time.time()
        save_checkpoint(out / f"checkpoint_stage{stage}.bin", ckpt)

    stage_done_fn.t0 = time.time()

    ckpt = run_pipeline(
        ds.train, ds.mesh, config, stages=stages, start=start,
        log_fn=log_fn, preview_fn=preview_fn, stage_done_fn=stage_done_fn,
    )
    log_file.close()
    save_checkpoint(out / "checkpoint.bin", ckpt)

    report = report_model(ckpt, ds.mesh, ds.train)
    _write_manifest(out, {
        "command": "train",
        "config_path": str(args.config) if args.config else None,
        "config": {f.name: getattr(config, f.name) for f in dataclasses.fields(config)},
        "dataset": str(args.dataset),
        "out": str(out),
        "seed": config.seed,
        "stages": list(stages),
        "wall_clock_sec": timings,
        "report": report.as_dict(),
    })
    print(f"trained through stage {ckpt.stage}: {report.gaussian_count} gaussians, "
          f"{report.total_bytes} bytes, train PSNR {report.psnr_mean:.2f} dB")
    return EXIT_OK


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_frames(Path(args.dataset))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = ds.train if args.split == "train" else ds.test
    if not records:
        raise InvalidSpec(f"split '{args.split}' is empty")
    count = len(records) if args.frames is None else min(args.frames, len(records))

    t0 = time.time()
    written = []
    for rec in records[:count]:
        pose = rec.pose
        if args.refine_pose > 0:
            pose = refine_pose_test_time(rec, ckpt, ds.mesh, iterations=args.refine_pose)
        with torch.no_grad():
            bundle = render_frame(ckpt.gaussians, ds.mesh, ckpt.texture, pose, rec.camera, mode=args.mode)
        name = f"{rec.index:05d}.png"
        save_png_rgb(out / name, bundle.image)
        written.append(name)
    _write_manifest(out, {
        "command": "render",
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset),
        "mode": args.mode,
        "split": args.split,
        "refine_pose": args.refine_pose,
        "seed": ckpt.config.seed,
        "out": str(out),
        "wall_clock_sec": {"render": round(time.time() - t0, 3)},
        "frames_written": written,
    })
    print(f"wrote {len(written)} {args.mode} frames to {out}")
    return EXIT_OK


def _masked_metrics(pred, gt_rgb, gt_mask, depth, alpha):
    """Black-background evaluation: zero everything outside the union of
    GT and predicted silhouettes, then compare full images."""
    from .losses import psnr as psnr_fn
    from .losses import ssim_metric

    pred_sil = 1.0 - (1.0 - torch.isfinite(depth).to(DTYPE)) * (1.0 - alpha)
    union = ((gt_mask > 0.5) | (pred_sil > 0.5)).to(DTYPE)[:, :, None]
    p = pred * union
    g = gt_rgb * union
    return psnr_fn(p, g), float(ssim_metric(p, g))


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_frames(Path(args.dataset))
    records = ds.train if args.split == "train" else ds.test
    if not records:
        raise InvalidSpec(f"split '{args.split}' is empty")
    out = Path(args.out) if args.out else Path(args.dataset) / f"eval_{args.split}"
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    rows = []
    for rec in records:
        with torch.no_grad():
            bundle = render_frame(ckpt.gaussians, ds.mesh, ckpt.texture, rec.pose, rec.camera, mode="hybrid")
        p, s = _masked_metrics(bundle.image, rec.rgb, rec.mask, bundle.depth, bundle.alpha)
        rows.append({"frame": rec.index, "psnr": p, "ssim": s})

    report = report_model(ckpt, ds.mesh, [])
    summary = {
        "command": "eval",
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset),
        "split": args.split,
        "seed": ckpt.config.seed,
        "gaussian_count": report.gaussian_count,
        "storage_bytes": report.total_bytes,
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
        "per_frame": rows,
        "wall_clock_sec": {"eval": round(time.time() - t0, 3)},
    }
    (out / "metrics.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_manifest(out, summary)
    print(f"{args.split}: PSNR {summary['psnr_mean']:.2f} dB, SSIM {summary['ssim_mean']:.4f}, "
          f"{report.gaussian_count} gaussians, {report.total_bytes} bytes")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshsplat",
        description="Hybrid splat-plus-textured-mesh avatar fitting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="scene spec file (key = value lines)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run fitting stages 1..N")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None, help="training config file; defaults apply if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--stages", type=int, default=3, choices=(1, 2, 3), help="stop after this stage")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--echo-config", action="store_true", help="print the resolved config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="pose/camera source")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="hybrid", choices=("mesh_only", "gaussians_only", "hybrid"))
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--refine-pose", type=int, default=0, dest="refine_pose",
                   help="test-time pose optimization iterations (0 = off)")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("eval", help="metrics for a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("MESHSPLAT_LOGLEVEL", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, InvalidSpec, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MeshsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
