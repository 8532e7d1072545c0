"""Gaussian initialisation from LiDAR samples and feature depths; sky spawning.

Feature depths follow a two-branch rule: correspondences with enough
parallax are triangulated (ray midpoint), distant ones with little parallax
get ``C * tan(theta) / flow`` where ``theta`` is the ray/optical-axis angle
and ``C`` is calibrated on the current frame so both branches agree at the
flow threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateRays
from .plane import classify
from .scene import FreeGaussians, PlaneGaussians, SphereGaussians

MIN_RAY_ANGLE = 1e-5
MIN_SKY_ELEVATION = 0.02     # sin(elevation); rays closer to the horizon are skipped


@dataclass
class DepthEstimates:
    """Feature depths in the current camera: pixel (u, v), depth, source, ray angle."""

    pixel: np.ndarray
    depth: np.ndarray
    triangulated: np.ndarray     # bool per estimate; False = approximated
    theta: np.ndarray

    def __len__(self):
        return len(self.depth)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0, bool), np.zeros(0))


def _rays(pixels, pose, K):
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy,
                  np.ones(len(pixels))], axis=-1) @ pose[:3, :3].T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def triangulate_many(pixel_t, pixel_t1, pose_t, pose_t1, K):
    """Midpoint triangulation for many pairs.

    Returns (depth in camera t, ok mask); ``ok`` is False for near-parallel
    rays, zero baseline or points at/behind camera t.
    """
    o1, o2 = pose_t[:3, 3], pose_t1[:3, 3]
    d1 = _rays(pixel_t, pose_t, K)
    d2 = _rays(pixel_t1, pose_t1, K)
    w0 = o1 - o2
    b = np.sum(d1 * d2, axis=-1)
    d = d1 @ w0
    e = d2 @ w0
    denom = 1.0 - b * b
    sin_angle = np.linalg.norm(np.cross(d1, d2), axis=-1)
    ok = (sin_angle > MIN_RAY_ANGLE) & (np.linalg.norm(o2 - o1) > 1e-12)
    den = np.where(ok, denom, 1.0)
    s = (b * e - d) / den
    t = (e - b * d) / den
    mid = 0.5 * ((o1 + s[:, None] * d1) + (o2 + t[:, None] * d2))
    z = (mid - o1) @ pose_t[:3, 2]
    ok &= z > 0
    return z, ok


def triangulate(pixel_t, pixel_t1, pose_t, pose_t1, K) -> float:
    """Depth (camera-t z) of the midpoint between the two viewing rays of a correspondence."""
    if np.linalg.norm(pose_t1[:3, 3] - pose_t[:3, 3]) <= 1e-12:
        raise DegenerateRays("zero baseline")
    d1 = _rays(pixel_t, pose_t, K)[0]
    d2 = _rays(pixel_t1, pose_t1, K)[0]
    if np.linalg.norm(np.cross(d1, d2)) < MIN_RAY_ANGLE:
        raise DegenerateRays("rays nearly parallel")
    z, ok = triangulate_many(np.atleast_2d(pixel_t), np.atleast_2d(pixel_t1), pose_t, pose_t1, K)
    if not ok[0]:
        raise BehindCamera(f"triangulated depth {z[0]:.3g} <= 0")
    return float(z[0])


def ray_angle(pixels, K) -> np.ndarray:
    """Angle between each pixel ray and the optical axis."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    xn = (pixels[:, 0] - K.cx) / K.fx
    yn = (pixels[:, 1] - K.cy) / K.fy
    return np.arctan(np.hypot(xn, yn))


def approximate_depth(theta, flow, calibration: float, theta_min: float = np.deg2rad(1.0)):
    """Depth of a low-parallax feature: ``calibration * tan(theta) / flow``, theta clamped below."""
    theta = np.maximum(np.asarray(theta, dtype=np.float64), theta_min)
    return calibration * np.tan(theta) / np.asarray(flow, dtype=np.float64)


def calibrate_depth_constant(theta, flow, depth, flow_threshold: float, default: float,
                             min_points: int = 5, theta_min: float = np.deg2rad(1.0)) -> float:
    """Median of depth * flow / tan(theta) over triangulated points with flow in [f_th, 2 f_th]."""
    theta = np.maximum(np.asarray(theta), theta_min)
    flow = np.asarray(flow)
    band = (flow >= flow_threshold) & (flow <= 2 * flow_threshold)
    if band.sum() < min_points:
        return default
    return float(np.median(np.asarray(depth)[band] * flow[band] / np.tan(theta[band])))


def parallax_flow(corr, pose_t, pose_t1, K) -> np.ndarray:
    """Flow after removing the inter-frame rotation (infinite homography).

    For a purely translating camera this equals the raw flow; with rotation
    it keeps only the depth-dependent part that the low-parallax branch models.
    """
    if len(corr) == 0:
        return np.zeros(0)
    R_rel = pose_t[:3, :3].T @ pose_t1[:3, :3]      # camera t1 -> camera t
    p = corr.pixel_t1
    rays = np.stack([(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy, np.ones(len(p))], axis=-1) @ R_rel.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * rays[:, 0] / rays[:, 2] + K.cx
        v = K.fy * rays[:, 1] / rays[:, 2] + K.cy
    return np.hypot(u - corr.pixel_t[:, 0], v - corr.pixel_t[:, 1])


def estimate_depths(corr, pose_t, pose_t1, K, config) -> DepthEstimates:
    """Depths in camera t for every correspondence (pixel_t in the current frame)."""
    if len(corr) == 0:
        return DepthEstimates.empty()
    flow = parallax_flow(corr, pose_t, pose_t1, K)
    theta = ray_angle(corr.pixel_t, K)
    theta_min = np.deg2rad(config.theta_min_deg)
    z, ok = triangulate_many(corr.pixel_t, corr.pixel_t1, pose_t, pose_t1, K)
    tri = ok & (flow >= config.flow_threshold)
    C = calibrate_depth_constant(theta[tri], flow[tri], z[tri], config.flow_threshold,
                                 config.depth_calibration_default, theta_min=theta_min)
    approx = ~tri & (flow > 0) & np.isfinite(flow)
    depth = np.full(len(corr), np.nan)
    depth[tri] = z[tri]
    depth[approx] = approximate_depth(theta[approx], flow[approx], C, theta_min)
    keep = np.isfinite(depth) & (depth > 0)
    return DepthEstimates(corr.pixel_t[keep], depth[keep], tri[keep], theta[keep])


# ------------------------------------------------------------------ seeding

def median_depth_error(rendered_depth, frame) -> float:
    """Median |rendered - sparse| over LiDAR samples with rendered coverage (nan if none)."""
    if len(frame.sparse_depth) == 0:
        return float("nan")
    u, v = frame.sparse_uv[:, 0], frame.sparse_uv[:, 1]
    r = rendered_depth[v, u]
    valid = r > 0
    if not np.any(valid):
        return float("nan")
    return float(np.median(np.abs(r[valid] - frame.sparse_depth[valid])))


def seed_pixels(frame, estimates: DepthEstimates | None, silhouette=None, rendered_depth=None,
                config=None):
    """Pixels (u, v) and depths that should receive new Gaussians.

    LiDAR samples come first, feature depths fill pixels LiDAR did not
    cover. A pixel is seeded when its silhouette is below S_th, or when
    the rendered depth misses its depth by more than ``mde_gate`` * MDE.
    Sky pixels never seed.
    """
    H, W = frame.height, frame.width
    uv = [frame.sparse_uv.astype(np.int64)]
    dd = [frame.sparse_depth]
    if estimates is not None and len(estimates):
        px = np.round(estimates.pixel).astype(np.int64)
        inside = (px[:, 0] >= 0) & (px[:, 0] < W) & (px[:, 1] >= 0) & (px[:, 1] < H)
        uv.append(px[inside])
        dd.append(estimates.depth[inside])
    uv = np.concatenate(uv).reshape(-1, 2)
    dd = np.concatenate(dd)
    if len(uv) == 0:
        return uv, dd
    lin = uv[:, 1] * W + uv[:, 0]
    _, first = np.unique(lin, return_index=True)
    first.sort()
    uv, dd = uv[first], dd[first]
    keep = np.ones(len(uv), dtype=bool)
    if frame.sky_mask is not None:
        keep &= ~frame.sky_mask[uv[:, 1], uv[:, 0]]
    if silhouette is not None:
        gate = silhouette[uv[:, 1], uv[:, 0]] < config.silhouette_add_threshold
        if rendered_depth is not None:
            mde = median_depth_error(rendered_depth, frame)
            if np.isfinite(mde):
                err = np.abs(rendered_depth[uv[:, 1], uv[:, 0]] - dd)
                gate |= err > config.mde_gate * mde
        keep &= gate
    return uv[keep], dd[keep]


def seed_from_frame(scene, frame, estimates=None, render_output=None, segment_id=None,
                    trackers=()) -> int:
    """Back-project gated LiDAR and feature pixels into new Gaussians.

    Points within D_th of the road segment ``segment_id`` become road
    Gaussians, the rest free Gaussians. Returns how many were added.
    """
    cfg = scene.config
    sil = None if render_output is None else render_output.silhouette
    rdepth = None if render_output is None else render_output.depth
    uv, depth = seed_pixels(frame, estimates, sil, rdepth, cfg)
    if len(uv) == 0:
        return 0
    pts = frame.backproject(uv, depth)
    color = frame.rgb[uv[:, 1], uv[:, 0]]
    radius = depth / frame.intrinsics.fx * cfg.seed_radius_px
    inl = np.zeros(len(pts), dtype=bool)
    if segment_id is not None and scene.segments:
        idx, _ = classify(pts, scene.segments[segment_id], cfg.plane_distance_threshold)
        inl[idx] = True
    n = 0
    if np.any(inl):
        k = int(inl.sum())
        n += scene.append("inlier", PlaneGaussians(
            xz=pts[inl][:, [0, 2]].copy(), log_scale=np.log(np.repeat(radius[inl, None], 2, axis=1)),
            color=color[inl].copy(), opacity=np.zeros(k), segment_id=np.full(k, segment_id, dtype=np.int64),
        ), trackers)
    out = ~inl
    if np.any(out):
        k = int(out.sum())
        n += scene.append("free", FreeGaussians(
            position=pts[out].copy(), log_scale=np.log(np.repeat(radius[out, None], 3, axis=1)),
            color=color[out].copy(), rotation=np.tile([1.0, 0.0, 0.0, 0.0], (k, 1)), opacity=np.zeros(k),
        ), trackers)
    return n


def sky_cell_size(frame, pixels: float = 2.0) -> float:
    """Angular size (rad) of the sky deduplication grid cell."""
    return pixels / frame.intrinsics.fx


def _sky_cells(dirs, cell):
    az = np.arctan2(dirs[:, 0], dirs[:, 2])
    el = np.arcsin(np.clip(dirs[:, 1], -1.0, 1.0))
    return np.stack([np.floor(az / cell), np.floor(el / cell)], axis=-1).astype(np.int64)


def spawn_sky(scene, frame, render_output=None, cell_pixels: float = 2.0, trackers=()) -> int:
    """Add sky Gaussians where sky pixels are not yet covered.

    Ray directions are rotated into the sky frame by the pose rotation only;
    each one meets the sphere at radius * direction. At most one new
    Gaussian per angular grid cell, and none in cells already holding one.
    """
    if frame.sky_mask is None:
        return 0
    cfg = scene.config
    R = cfg.sky_radius
    vs, us = np.nonzero(frame.sky_mask)
    if len(us) == 0:
        return 0
    if render_output is not None:
        low = render_output.silhouette[vs, us] < cfg.silhouette_add_threshold
        vs, us = vs[low], us[low]
    uv = np.stack([us, vs], axis=-1)
    dirs = frame.ray_directions(uv)
    up = dirs[:, 1] > MIN_SKY_ELEVATION
    uv, dirs = uv[up], dirs[up]
    if len(dirs) == 0:
        return 0
    cell = sky_cell_size(frame, cell_pixels)
    cells = _sky_cells(dirs, cell)
    occupied = set()
    if len(scene.sky):
        xz = scene.sky.xz
        y = np.sqrt(np.maximum(R * R - np.sum(xz * xz, axis=1), 0.0))
        existing = np.stack([xz[:, 0], y, xz[:, 1]], axis=-1) / R
        occupied = set(map(tuple, _sky_cells(existing, cell)))
    chosen = []
    for i, c in enumerate(map(tuple, cells)):
        if c not in occupied:
            occupied.add(c)
            chosen.append(i)
    if not chosen:
        return 0
    chosen = np.asarray(chosen)
    d = dirs[chosen]
    k = len(chosen)
    scale = np.full((k, 2), np.log(R * cell))
    return scene.append("sky", SphereGaussians(
        xz=R * d[:, [0, 2]], log_scale=scale,
        color=frame.rgb[uv[chosen, 1], uv[chosen, 0]].copy(), opacity=np.zeros(k),
    ), trackers)
