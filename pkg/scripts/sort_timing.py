"""Per-tile sort cost of grouped versus unified ordering.

Reports comparison counts and the wall-time share of the sort inside a
full render, on random family-ordered scenes or on a saved checkpoint.
Nothing here is asserted; the numbers are for reading.

Usage::

    python scripts/sort_timing.py                       # random scenes
    python scripts/sort_timing.py --checkpoint runs/street/scene.ckpt --seed 7
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

from hybridsplat.checkpoint import load_scene
from hybridsplat.ingest import synth_scene
from hybridsplat.raster import kernels, project, render
from hybridsplat.raster.projection import tile_rects
from hybridsplat.raster.render import SORT_MODES

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))


def sort_only(scene, frame, mode, repeats):
    tile = scene.config.tile_size
    sp = project(scene, frame)
    rect = tile_rects(sp, frame.height, frame.width, tile)
    grid = np.array([(frame.width + tile - 1) // tile, (frame.height + tile - 1) // tile], dtype=np.int64)
    offsets, lists = kernels.bin_tiles(rect, grid)
    fam = sp.family.astype(np.int64)
    best, comps = np.inf, 0
    for _ in range(repeats):
        work = lists.copy()
        t0 = time.perf_counter()
        c = kernels.sort_tiles(offsets, work, sp.depth, fam, SORT_MODES[mode])
        best = min(best, time.perf_counter() - t0)
        comps = int(c.sum())
    return best, comps


def render_time(scene, frame, mode, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        render(scene, frame, mode)
        best = min(best, time.perf_counter() - t0)
    return best


def scenes(args):
    if args.checkpoint:
        sc = load_scene(args.checkpoint)
        frames, _ = synth_scene(args.seed, args.frames, (args.size, args.size))
        for f in frames:
            yield f"frame {f.index}", sc, f
    else:
        from tests.toys import random_ordered_scene

        for s in range(args.scenes):
            rng = np.random.default_rng(s)
            sc, f = random_ordered_scene(rng, n_free=200, n_inlier=300, n_sky=100, H=128, W=128, f=100.0)
            yield f"scene {s}", sc, f


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--scenes", type=int, default=5)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    tot = {"grouped": [0.0, 0, 0.0], "unified": [0.0, 0, 0.0]}
    for name, sc, f in scenes(args):
        row = [name]
        for mode in ("grouped", "unified"):
            ts, c = sort_only(sc, f, mode, args.repeats)
            tr = render_time(sc, f, mode, args.repeats)
            tot[mode][0] += ts
            tot[mode][1] += c
            tot[mode][2] += tr
            row.append(f"{mode}: {c} cmp, sort {ts * 1e3:.2f} ms of render {tr * 1e3:.2f} ms")
        print("  ".join(row))
    g, u = tot["grouped"], tot["unified"]
    print(f"comparisons saved: {1 - g[1] / max(u[1], 1):.1%}")
    print(f"sort time saved: {1 - g[0] / max(u[0], 1e-12):.1%}")
    print(f"sort share of unified render: {u[0] / max(u[2], 1e-12):.1%}")
    print(f"render time saved: {1 - g[2] / max(u[2], 1e-12):.1%}")


if __name__ == "__main__":
    main()
