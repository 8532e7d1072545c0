"""Online mapping loop: seed, optimize over the keyframe list, adapt, report."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapt import (DensifyStats, ImportanceState, accumulate_importance, densify_and_prune,
                    importance_prune)
from .config import SceneConfig
from .errors import DegenerateCloud, HybridSplatError, MissingFrame, VerticalPlane
from .ingest import match_features
from .metrics import depth_errors, lidar_region_mask, psnr, sparse_depth_errors, ssim
from .optimize import Adam, KeyframeList, loss_and_gradients, update_keyframes
from .plane import segment_for_frame, update_segments
from .raster import render, sort_comparisons
from .scene import HybridScene
from .seeding import estimate_depths, seed_from_frame, spawn_sky

log = logging.getLogger(__name__)

TIME_COLUMNS = ("wall_time",)


@dataclass
class FrameRecord:
    frame: int
    psnr: float
    ssim: float
    depth_mae: float
    depth_rmse: float
    dense_depth_mae: float
    n_free: int
    n_inlier: int
    n_sky: int
    seeded: int
    sky_added: int
    cloned: int
    split: int
    pruned: int
    importance_pruned: int
    comparisons_grouped: int
    comparisons_unified: int
    skipped_steps: int
    wall_time: float


@dataclass
class RunReport:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def columns(self):
        return [f for f in FrameRecord.__dataclass_fields__]

    def comparable(self) -> list:
        """Rows without wall-time columns, for determinism checks."""
        return [{k: v for k, v in asdict(r).items() if k not in TIME_COLUMNS} for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns(), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
        return buf.getvalue()

    def summary(self) -> str:
        if not self.rows:
            return "no frames processed"
        last = self.rows[-1]
        mean_psnr = np.mean([r.psnr for r in self.rows])
        lines = [
            f"frames: {len(self.rows)}",
            f"final frame {last.frame}: PSNR {last.psnr:.2f} dB, SSIM {last.ssim:.4f}, "
            f"sparse depth MAE {last.depth_mae:.4f} m, RMSE {last.depth_rmse:.4f} m",
            f"mean PSNR over frames: {mean_psnr:.2f} dB",
            f"gaussians: free {last.n_free}, road {last.n_inlier}, sky {last.n_sky}",
            f"sort comparisons (grouped / unified): "
            f"{sum(r.comparisons_grouped for r in self.rows)} / {sum(r.comparisons_unified for r in self.rows)}",
            f"total wall time: {sum(r.wall_time for r in self.rows):.1f} s",
        ]
        return "\n".join(lines)

    def write(self, path_csv, path_summary=None) -> None:
        with open(path_csv, "w") as fh:
            fh.write(self.to_csv())
        if path_summary is not None:
            with open(path_summary, "w") as fh:
                fh.write(self.summary() + "\n")


def scene_extent(centers) -> float:
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if len(c) == 0:
        return 1.0
    return max(1.1 * float(np.max(np.linalg.norm(c - c.mean(axis=0), axis=1))), 1.0)


class Mapper:
    """Incremental mapper holding the scene and all per-Gaussian optimizer state.

    Parameters
    ----------
    config : SceneConfig
    match_method : str
        Correspondence provider passed to ``match_features``.
    record_unified : bool
        Also count unified-sort comparisons per frame (costs one extra projection).
    """

    def __init__(self, config: SceneConfig | None = None, match_method: str = "auto",
                 record_unified: bool = True):
        self.config = (config or SceneConfig()).validate()
        self.scene = HybridScene(config=self.config)
        self.adam = Adam(self.config)
        self.stats = DensifyStats()
        self.importance = ImportanceState()
        self.keyframes = KeyframeList(self.config.keyframe_count)
        self.rng = np.random.default_rng(self.config.seed)
        self.match_method = match_method
        self.record_unified = record_unified
        self.frames = {}
        self.plane_keyframes = []
        self._points = []
        self._point_frames = []
        self.report = RunReport()

    @property
    def trackers(self):
        return (self.adam, self.stats, self.importance)

    # -------------------------------------------------------------- stages

    def _update_extent(self):
        ext = scene_extent([f.center for f in self.frames.values()])
        self.scene.extent = ext
        self.adam.extent = ext

    def _estimate(self, frame):
        prev = self.frames.get(frame.index - 1)
        if prev is None:
            return None
        corr = match_features(frame, prev, self.match_method, self.config.match_stride)
        if len(corr) == 0:
            return None
        return estimate_depths(corr, frame.pose, prev.pose, frame.intrinsics, self.config)

    def _update_planes(self, frame, estimates):
        cfg = self.config
        pts = [frame.backproject(frame.sparse_uv, frame.sparse_depth)]
        if estimates is not None and len(estimates):
            pts.append(frame.backproject(estimates.pixel, estimates.depth))
        pts = np.concatenate(pts).reshape(-1, 3)
        self._points.append(pts)
        self._point_frames.append(np.full(len(pts), frame.index))
        if frame.index % cfg.keyframe_interval != 0 and self.scene.segments:
            return
        if frame.index % cfg.keyframe_interval == 0:
            self.plane_keyframes.append(frame.index)
        keys = self.plane_keyframes or [frame.index]
        try:
            self.scene.segments = update_segments(
                self.scene.segments, keys, np.concatenate(self._points), np.concatenate(self._point_frames),
                cfg.plane_distance_threshold, cfg.ransac_iterations, rng_seed=cfg.seed, open_tail=True)
            self.scene.touch()
        except (DegenerateCloud, VerticalPlane) as exc:
            log.info("frame %d: no road plane (%s)", frame.index, exc)

    def _optimize(self, iterations: int):
        cfg = self.config
        result = {"cloned": 0, "split": 0, "pruned": 0}
        entries = self.keyframes.entries
        for it in range(1, iterations + 1):
            fid = entries[int(self.rng.integers(len(entries)))]
            frame = self.frames[fid]
            report, grads, _ = loss_and_gradients(self.scene, frame)
            self.stats.record(grads)
            self.importance.record_gradient(grads)
            self.adam.step(self.scene, grads)
            if it % cfg.densify_interval == 0:
                r = densify_and_prune(self.scene, self.stats, self.rng, self.trackers)
                result["cloned"] += r.cloned
                result["split"] += r.split
                result["pruned"] += r.pruned
            if self.keyframes.is_full() and it % cfg.importance_interval == 0:
                accumulate_importance(self.importance, self.scene, [self.frames[i] for i in entries],
                                      report.total)
        return result

    def process(self, frame) -> FrameRecord:
        """Run the full per-frame pipeline and append a FrameRecord to the report."""
        t0 = time.perf_counter()
        cfg = self.config
        frame.validate()
        self.frames[frame.index] = frame
        self._update_extent()
        try:
            out = render(self.scene, frame)
            estimates = self._estimate(frame)
            self._update_planes(frame, estimates)
            seg = segment_for_frame(self.scene.segments, frame.index) if self.scene.segments else None
            seeded = seed_from_frame(self.scene, frame, estimates, out if len(self.scene) else None, seg,
                                     self.trackers)
            sky_added = spawn_sky(self.scene, frame, out if len(self.scene.sky) else None,
                                  trackers=self.trackers)
            self.keyframes.advance(frame.index)
            opt = self._optimize(cfg.iterations_per_frame)
            imp = 0
            if frame.index % cfg.importance_prune_every == 0 and self.importance.samples > 0:
                imp = importance_prune(self.scene, self.importance, cfg.prune_rate, self.trackers)
            if frame.index % cfg.keyframe_interval == 0:
                update_keyframes(self.keyframes, frame, list(self.frames.values()), self.rng)
        except HybridSplatError as exc:
            exc.args = (f"frame {frame.index}: {exc}",)
            raise
        rec = self._record(frame, seeded, sky_added, opt, imp, time.perf_counter() - t0)
        self.report.rows.append(rec)
        return rec

    def _record(self, frame, seeded, sky_added, opt, imp, elapsed) -> FrameRecord:
        cfg = self.config
        out = render(self.scene, frame)
        mae, rmse = sparse_depth_errors(out.depth, frame, out.silhouette, cfg.silhouette_filter_threshold)
        dense = float("nan")
        if frame.gt_depth is not None:
            dense, _ = depth_errors(out.depth, frame.gt_depth, lidar_region_mask(frame))
        unified = sort_comparisons(self.scene, frame, "unified") if self.record_unified else 0
        c = self.scene.counts()
        return FrameRecord(
            frame=frame.index, psnr=psnr(np.clip(out.color, 0, 1), frame.rgb),
            ssim=ssim(np.clip(out.color, 0, 1), frame.rgb), depth_mae=mae, depth_rmse=rmse,
            dense_depth_mae=dense, n_free=c["free"], n_inlier=c["inlier"], n_sky=c["sky"],
            seeded=seeded, sky_added=sky_added, cloned=opt["cloned"], split=opt["split"],
            pruned=opt["pruned"], importance_pruned=imp, comparisons_grouped=out.comparisons,
            comparisons_unified=unified, skipped_steps=self.adam.skipped, wall_time=elapsed,
        )

    def run(self, frames, progress=None) -> RunReport:
        if len(frames) == 0:
            raise MissingFrame(0)
        for f in frames:
            rec = self.process(f)
            if progress is not None:
                progress(rec)
        return self.report


def run_mapping(frames, config: SceneConfig | None = None, match_method: str = "auto", progress=None):
    """Map a whole sequence; returns (scene, report)."""
    m = Mapper(config, match_method)
    report = m.run(frames, progress)
    return m.scene, report


def evaluate(scene, frames, record_unified: bool = True) -> RunReport:
    """Render every frame from ``scene`` and score it; mapping-only columns are 0."""
    cfg = scene.config
    report = RunReport()
    for frame in frames:
        t0 = time.perf_counter()
        out = render(scene, frame)
        color = np.clip(out.color, 0, 1)
        mae, rmse = sparse_depth_errors(out.depth, frame, out.silhouette, cfg.silhouette_filter_threshold)
        dense = float("nan")
        if frame.gt_depth is not None:
            dense, _ = depth_errors(out.depth, frame.gt_depth, lidar_region_mask(frame))
        c = scene.counts()
        report.rows.append(FrameRecord(
            frame=frame.index, psnr=psnr(color, frame.rgb), ssim=ssim(color, frame.rgb), depth_mae=mae,
            depth_rmse=rmse, dense_depth_mae=dense, n_free=c["free"], n_inlier=c["inlier"], n_sky=c["sky"],
            seeded=0, sky_added=0, cloned=0, split=0, pruned=0, importance_pruned=0,
            comparisons_grouped=out.comparisons,
            comparisons_unified=sort_comparisons(scene, frame, "unified") if record_unified else 0,
            skipped_steps=0, wall_time=time.perf_counter() - t0))
    return report


def fuse_scene(scene, frames, voxel_size: float | None = None, max_depth: float = 30.0):
    """TSDF-fuse silhouette-filtered rendered depth of ``scene`` at every frame pose.

    The sky sphere is not surface geometry, so it is left out of the render;
    pixels it alone covered then fail the silhouette filter. Pixels deeper
    than ``max_depth`` are left out to bound the volume.
    """
    from .adapt import silhouette_filter
    from .mesh import TsdfVolume, depth_bounds, integrate

    cfg = scene.config
    voxel = voxel_size or cfg.voxel_size
    solid = scene.copy()
    solid.keep("sky", np.zeros(len(solid.sky), dtype=bool))
    depths = []
    for frame in frames:
        out = render(solid, frame)
        d = silhouette_filter(out.depth, out.silhouette, cfg.silhouette_filter_threshold)
        d[d > max_depth] = 0.0
        depths.append(d)
    trunc = cfg.truncation_voxels * voxel
    lo, hi = depth_bounds(depths, [f.pose for f in frames], frames[0].intrinsics, margin=trunc + voxel)
    vol = TsdfVolume.from_bounds(lo, hi, voxel, cfg.truncation_voxels, cfg.max_weight)
    for d, frame in zip(depths, frames):
        integrate(vol, d, frame.pose, frame.intrinsics)
    return vol
