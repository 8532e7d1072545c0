"""Hybrid RGB-D rasterizer: project, bin into tiles, grouped sort, composite, backward."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import StaleState
from ..scene import (FreeGaussians, PlaneGaussians, SphereGaussians, lift_plane_backward,
                     lift_sphere_backward, normalize_backward, quat_to_rotmat_backward)
from . import kernels
from .projection import (FAMILY_FREE, FAMILY_INLIER, FAMILY_SKY, Splats, project,
                         project_backward, tile_rects)

SORT_MODES = {"grouped": 0, "grouped_sorted_inliers": 1, "unified": 2}


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray
    transmittance: np.ndarray
    n_contrib: np.ndarray
    tile_offsets: np.ndarray
    tile_lists: np.ndarray
    splats: Splats
    comparisons: int
    scene_version: int
    frame_index: int
    tile_size: int

    @property
    def height(self):
        return self.color.shape[0]

    @property
    def width(self):
        return self.color.shape[1]


@dataclass
class GradientBuffer:
    """Gradients for every learnable array, laid out like the scene families.

    ``grad2d`` holds the per-Gaussian norm of dL/d(mean2d) for this render and
    ``visible`` which Gaussians landed on at least one tile; adapt-side
    statistics accumulate from these.
    """

    free: FreeGaussians
    sky: SphereGaussians
    inlier: PlaneGaussians
    grad2d: dict = field(default_factory=dict)
    visible: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, scene) -> "GradientBuffer":
        def z(fam):
            return type(fam)(**{k: np.zeros_like(getattr(fam, k), dtype=np.float64)
                                if k != "segment_id" else getattr(fam, k).copy()
                                for k in fam.array_fields})
        buf = cls(z(scene.free), z(scene.sky), z(scene.inlier))
        for name, fam in (("free", scene.free), ("inlier", scene.inlier), ("sky", scene.sky)):
            buf.grad2d[name] = np.zeros(len(fam))
            buf.visible[name] = np.zeros(len(fam), dtype=bool)
        return buf

    def families(self):
        return {"free": self.free, "inlier": self.inlier, "sky": self.sky}

    def flat(self) -> np.ndarray:
        parts = []
        for fam in (self.free, self.inlier, self.sky):
            for k, v in fam.learnable_arrays().items():
                parts.append(np.ravel(v))
        return np.concatenate(parts) if parts else np.zeros(0)

    def all_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def add(self, other: "GradientBuffer", weight: float = 1.0) -> None:
        for mine, theirs in zip((self.free, self.inlier, self.sky), (other.free, other.inlier, other.sky)):
            for k in mine.learnable_arrays():
                getattr(mine, k)[...] += weight * getattr(theirs, k)


def render(scene, frame, sort_mode: str = "grouped") -> RenderOutput:
    """Render color, depth and silhouette of ``scene`` seen from ``frame``.

    Deterministic and side-effect free. ``sort_mode`` selects the per-tile
    ordering: ``grouped`` (free by depth, road in insertion order, sky by
    depth), ``grouped_sorted_inliers`` or ``unified`` (single global depth
    sort, the reference ordering).
    """
    if sort_mode == "grouped" and scene.config.sort_inliers:
        sort_mode = "grouped_sorted_inliers"
    H, W = frame.height, frame.width
    tile = scene.config.tile_size
    splats = project(scene, frame)
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    rect = tile_rects(splats, H, W, tile)
    offsets, lists = kernels.bin_tiles(rect, np.array([ntx, nty], dtype=np.int64))
    comps = kernels.sort_tiles(offsets, lists, splats.depth, splats.family.astype(np.int64),
                               SORT_MODES[sort_mode])
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    sil = np.zeros((H, W))
    T = np.ones((H, W))
    nc = np.zeros((H, W), dtype=np.int64)
    if len(splats):
        kernels.composite_forward(offsets, lists, splats.mean2d, splats.conic, splats.opacity,
                                  splats.color, splats.depth, H, W, tile, color, depth, sil, T, nc)
    return RenderOutput(color, depth, sil, T, nc, offsets, lists, splats, int(comps.sum()),
                        scene.version, frame.index, tile)


def sort_comparisons(scene, frame, sort_mode: str) -> int:
    """Comparison count of the per-tile sort alone (no compositing)."""
    H, W = frame.height, frame.width
    tile = scene.config.tile_size
    splats = project(scene, frame)
    rect = tile_rects(splats, H, W, tile)
    ntx, nty = (W + tile - 1) // tile, (H + tile - 1) // tile
    offsets, lists = kernels.bin_tiles(rect, np.array([ntx, nty], dtype=np.int64))
    comps = kernels.sort_tiles(offsets, lists, splats.depth, splats.family.astype(np.int64),
                               SORT_MODES[sort_mode])
    return int(comps.sum())


def backward(scene, frame, output: RenderOutput, d_color, d_depth=None, d_silhouette=None) -> GradientBuffer:
    """Gradients of a loss w.r.t. every learnable parameter, given dL/dC, dL/dD, dL/dS."""
    if output.scene_version != scene.version or output.frame_index != frame.index:
        raise StaleState("scene or frame changed since render")
    sp = output.splats
    if len(sp) != len(scene):
        raise StaleState("primitive count differs from the scene")
    H, W = output.height, output.width
    d_depth = np.zeros((H, W)) if d_depth is None else d_depth
    d_sil = np.zeros((H, W)) if d_silhouette is None else d_silhouette
    P = len(sp)
    g_mean2d = np.zeros((P, 2))
    g_conic = np.zeros((P, 3))
    g_opac = np.zeros(P)
    g_color = np.zeros((P, 3))
    g_depth = np.zeros(P)
    if P:
        kernels.composite_backward(output.tile_offsets, output.tile_lists, sp.mean2d, sp.conic,
                                   sp.opacity, sp.color, sp.depth, H, W, output.tile_size,
                                   output.n_contrib, np.ascontiguousarray(d_color, dtype=np.float64),
                                   np.ascontiguousarray(d_depth, dtype=np.float64),
                                   np.ascontiguousarray(d_sil, dtype=np.float64),
                                   g_mean2d, g_conic, g_opac, g_color, g_depth)
    buf = GradientBuffer.zeros_like(scene)
    if P == 0:
        return buf
    g_pos, g_R, g_scale = project_backward(sp, frame, g_mean2d, g_conic, g_depth)
    g_q = quat_to_rotmat_backward(sp.quat, g_R)
    g_logit = g_opac * sp.opacity * (1.0 - sp.opacity)
    grad2d = np.linalg.norm(g_mean2d, axis=-1)
    on_tile = np.zeros(P, dtype=bool)
    on_tile[output.tile_lists] = True

    s = sp.family_slice(FAMILY_FREE)
    if s.stop > s.start:
        f = scene.free
        buf.free.position[...] = g_pos[s]
        buf.free.log_scale[...] = g_scale[s] * sp.scale[s]
        buf.free.color[...] = g_color[s]
        buf.free.rotation[...] = normalize_backward(f.rotation, g_q[s])
        buf.free.opacity[...] = g_logit[s]
    s = sp.family_slice(FAMILY_INLIER)
    if s.stop > s.start:
        buf.inlier.xz[...] = lift_plane_backward(scene.segment_coefficients(), g_pos[s])
        buf.inlier.log_scale[...] = (g_scale[s] * sp.scale[s])[:, [0, 2]]
        buf.inlier.color[...] = g_color[s]
        buf.inlier.opacity[...] = g_logit[s]
    s = sp.family_slice(FAMILY_SKY)
    if s.stop > s.start:
        buf.sky.xz[...] = lift_sphere_backward(scene.sky.xz, scene.config.sky_radius, g_pos[s], g_q[s])
        buf.sky.log_scale[...] = (g_scale[s] * sp.scale[s])[:, [0, 2]]
        buf.sky.color[...] = g_color[s]
        buf.sky.opacity[...] = g_logit[s]
    for name, fid in (("free", FAMILY_FREE), ("inlier", FAMILY_INLIER), ("sky", FAMILY_SKY)):
        s = sp.family_slice(fid)
        buf.grad2d[name] = grad2d[s].copy()
        buf.visible[name] = on_tile[s].copy()
    return buf


def hit_counts(scene, frame) -> dict:
    """Per-Gaussian count of pixels inside its 3-sigma screen ellipse, split by family."""
    sp = project(scene, frame)
    if len(sp) == 0:
        return {"free": np.zeros(0, np.int64), "inlier": np.zeros(0, np.int64), "sky": np.zeros(0, np.int64)}
    hits = kernels.footprint_hits(sp.mean2d, sp.conic, sp.radius, frame.height, frame.width)
    return {name: hits[sp.family_slice(fid)] for name, fid in
            (("free", FAMILY_FREE), ("inlier", FAMILY_INLIER), ("sky", FAMILY_SKY))}


# ------------------------------------------------------------ reference helpers

def composite(mean2d, conic, opacity, color, depth, pixel, t_min: float = kernels.T_MIN):
    """Front-to-back blend of already ordered primitives at one pixel.

    Returns (C, D, S, transmittance trace). Plain-Python mirror of the
    compositing kernel, kept for inspection and tests.
    """
    px, py = pixel
    T = 1.0
    C = np.zeros(3)
    D = 0.0
    S = 0.0
    trace = [T]
    for i in range(len(opacity)):
        if T < t_min:
            break
        dx, dy = px - mean2d[i][0], py - mean2d[i][1]
        a, b, c = conic[i]
        f = opacity[i] * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
        C += np.asarray(color[i]) * f * T
        D += depth[i] * f * T
        S += f * T
        T *= 1.0 - f
        trace.append(T)
    return C, D, S, np.array(trace)


def sort_grouped(family, depth, sort_inliers: bool = False):
    """Order for one tile's primitives plus the comparisons spent.

    Free Gaussians ascending by depth, then road Gaussians in insertion
    order, then sky ascending by depth. Stable.
    """
    family = np.asarray(family)
    depth = np.asarray(depth, dtype=np.float64)
    order = np.concatenate([np.nonzero(family == f)[0] for f in (FAMILY_FREE, FAMILY_INLIER, FAMILY_SKY)])
    lists = order.astype(np.int64)
    comps = kernels.sort_tiles(np.array([0, len(lists)], dtype=np.int64), lists, depth, family.astype(np.int64),
                               1 if sort_inliers else 0)
    return lists, int(comps[0])


def sort_unified(depth):
    lists = np.arange(len(depth), dtype=np.int64)
    comps = kernels.sort_tiles(np.array([0, len(lists)], dtype=np.int64), lists,
                               np.asarray(depth, dtype=np.float64), np.zeros(len(lists), np.int64), 2)
    return lists, int(comps[0])
