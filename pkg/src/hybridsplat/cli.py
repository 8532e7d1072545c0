"""Command-line entry point: synth, map, eval, render, mesh."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_scene, save_scene
from .config import SceneConfig
from .errors import HybridSplatError
from .ingest import read_dataset, synth_scene, write_pfm, write_png

log = logging.getLogger("hybridsplat")


def _config(args) -> SceneConfig:
    cfg = SceneConfig.load(args.config) if getattr(args, "config", None) else SceneConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        cfg = cfg.replace(iterations_per_frame=args.iterations)
    return cfg.validate()


def _frames(dataset, limit=None):
    frames = read_dataset(dataset)
    return frames[:limit] if limit else frames


def cmd_synth(args) -> int:
    H, W = (int(x) for x in args.resolution.lower().split("x"))
    frames, _ = synth_scene(args.seed if args.seed is not None else 0, args.frames, (H, W), args.out,
                            n_objects=args.objects, ground_slope=float(np.deg2rad(args.slope)))
    print(f"wrote {len(frames)} frames ({H}x{W}) to {args.out}")
    return 0


def cmd_map(args) -> int:
    from .pipeline import Mapper

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = _frames(args.dataset, args.limit)
    mapper = Mapper(cfg, match_method=args.matcher)

    def progress(r):
        print(f"frame {r.frame:4d}  PSNR {r.psnr:6.2f}  SSIM {r.ssim:.4f}  MAE {r.depth_mae:.4f}  "
              f"G {r.n_free}/{r.n_inlier}/{r.n_sky}  {r.wall_time:.1f}s", flush=True)

    report = mapper.run(frames, None if args.quiet else progress)
    save_scene(out / "scene.ckpt", mapper.scene)
    report.write(out / "report.csv", out / "summary.txt")
    (out / "config.txt").write_text(cfg.to_text())
    print(report.summary())
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate

    scene = load_scene(args.checkpoint)
    report = evaluate(scene, _frames(args.dataset, args.limit))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "eval.csv", out / "eval_summary.txt")
    print(report.to_csv() if args.csv else report.summary())
    return 0


def cmd_render(args) -> int:
    from .raster import render

    scene = load_scene(args.checkpoint)
    frames = _frames(args.dataset)
    if args.frames:
        wanted = {int(i) for i in args.frames.split(",")}
        frames = [f for f in frames if f.index in wanted]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f in frames:
        if args.pose:
            f.pose = np.loadtxt(args.pose).reshape(4, 4)
        r = render(scene, f)
        write_png(out / f"{f.index:06d}_color.png", np.clip(r.color, 0, 1))
        write_pfm(out / f"{f.index:06d}_depth.pfm", r.depth.astype(np.float32))
        write_pfm(out / f"{f.index:06d}_silhouette.pfm", r.silhouette.astype(np.float32))
    print(f"rendered {len(frames)} views to {out}")
    return 0


def cmd_mesh(args) -> int:
    from .mesh import extract_mesh, write_ply
    from .pipeline import fuse_scene

    scene = load_scene(args.checkpoint)
    vol = fuse_scene(scene, _frames(args.dataset), args.voxel, args.max_depth)
    verts, faces = extract_mesh(vol)
    write_ply(args.out, verts, faces)
    print(f"wrote {len(verts)} vertices, {len(faces)} faces to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridsplat", description="Online hybrid Gaussian street mapping")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a procedural street dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--resolution", default="128x128", help="HxW")
    s.add_argument("--objects", type=int, default=None, help="object count (default: 5-20 from seed)")
    s.add_argument("--slope", type=float, default=0.0, help="ground ramp angle in degrees")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("map", help="map a dataset and write a checkpoint plus report")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--iterations", type=int, help="override iterations per frame")
    s.add_argument("--limit", type=int, help="only the first N frames")
    s.add_argument("--matcher", default="auto", choices=["auto", "gt", "ncc"])
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("eval", help="score a checkpoint against a dataset")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--out")
    s.add_argument("--limit", type=int)
    s.add_argument("--csv", action="store_true", help="print the per-frame CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render views of a checkpoint to PNG/PFM")
    s.add_argument("checkpoint")
    s.add_argument("dataset", help="dataset providing poses and intrinsics")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", help="comma-separated frame indices")
    s.add_argument("--pose", help="4x4 camera->world pose file overriding the dataset poses")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("mesh", help="fuse rendered depth into a TSDF and export a PLY mesh")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--voxel", type=float)
    s.add_argument("--max-depth", type=float, default=30.0)
    s.set_defaults(func=cmd_mesh)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HybridSplatError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
