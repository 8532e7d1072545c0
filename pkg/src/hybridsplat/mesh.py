"""TSDF fusion of rendered depth maps and marching-cubes mesh export."""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from skimage.measure import marching_cubes

from .errors import EmptyVolume, FormatError


@dataclass
class TsdfVolume:
    """Axis-aligned voxel grid; ``tsdf`` is truncated SDF / truncation in [-1, 1].

    Voxel (i, j, k) has its centre at origin + voxel_size * (i, j, k).
    Unobserved voxels have weight 0 and tsdf 1.
    """

    origin: np.ndarray
    voxel_size: float
    tsdf: np.ndarray
    weight: np.ndarray
    truncation: float
    max_weight: float = 64.0

    @classmethod
    def from_bounds(cls, lo, hi, voxel_size: float, truncation_voxels: float = 4.0,
                    max_weight: float = 64.0, max_voxels: int = 40_000_000) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1, 2)
        if int(np.prod(dims)) > max_voxels:
            raise ValueError(f"volume of {tuple(dims)} voxels exceeds {max_voxels}")
        return cls(lo, float(voxel_size), np.ones(tuple(dims), dtype=np.float32),
                   np.zeros(tuple(dims), dtype=np.float32), truncation_voxels * voxel_size, max_weight)

    @property
    def dims(self):
        return self.tsdf.shape

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin.copy(), self.voxel_size, self.tsdf.copy(), self.weight.copy(),
                          self.truncation, self.max_weight)


@numba.njit(cache=True)
def _integrate_kernel(tsdf, weight, origin, voxel, Rwc, center, fx, fy, cx, cy, depth, trunc, max_w):
    H, W = depth.shape
    nx, ny, nz = tsdf.shape
    for i in range(nx):
        px = origin[0] + voxel * i - center[0]
        for j in range(ny):
            py = origin[1] + voxel * j - center[1]
            for k in range(nz):
                pz = origin[2] + voxel * k - center[2]
                # camera coordinates: R^T (p - c)
                xc = Rwc[0, 0] * px + Rwc[1, 0] * py + Rwc[2, 0] * pz
                yc = Rwc[0, 1] * px + Rwc[1, 1] * py + Rwc[2, 1] * pz
                zc = Rwc[0, 2] * px + Rwc[1, 2] * py + Rwc[2, 2] * pz
                if zc <= 1e-6:
                    continue
                u = int(np.floor(fx * xc / zc + cx + 0.5))
                v = int(np.floor(fy * yc / zc + cy + 0.5))
                if u < 0 or u >= W or v < 0 or v >= H:
                    continue
                d = depth[v, u]
                if not (d > 0.0):
                    continue
                sdf = d - zc
                if sdf < -trunc:
                    continue
                val = min(1.0, sdf / trunc)
                w = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w + val) / (w + 1.0)
                weight[i, j, k] = min(w + 1.0, max_w)


def integrate(volume: TsdfVolume, depth, pose, intrinsics) -> TsdfVolume:
    """Fuse one (already silhouette-filtered) z-depth image; pixels with depth <= 0 are skipped."""
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    if not np.any(depth > 0):
        return volume
    pose = np.asarray(pose, dtype=np.float64)
    _integrate_kernel(volume.tsdf, volume.weight, volume.origin, volume.voxel_size,
                      np.ascontiguousarray(pose[:3, :3]), np.ascontiguousarray(pose[:3, 3]),
                      float(intrinsics.fx), float(intrinsics.fy), float(intrinsics.cx), float(intrinsics.cy),
                      depth, float(volume.truncation), float(volume.max_weight))
    return volume


def depth_bounds(depths, poses, intrinsics, margin: float = 0.0):
    """Axis-aligned bounds of all back-projected valid depth pixels, padded by ``margin``."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for depth, pose in zip(depths, poses):
        v, u = np.nonzero(np.asarray(depth) > 0)
        if len(u) == 0:
            continue
        z = depth[v, u]
        cam = np.stack([(u - intrinsics.cx) / intrinsics.fx * z, (v - intrinsics.cy) / intrinsics.fy * z, z], -1)
        world = cam @ pose[:3, :3].T + pose[:3, 3]
        lo = np.minimum(lo, world.min(axis=0))
        hi = np.maximum(hi, world.max(axis=0))
    if not np.all(np.isfinite(lo)):
        raise EmptyVolume("no valid depth to fuse")
    return lo - margin, hi + margin


def extract_mesh(volume: TsdfVolume):
    """Marching-cubes surface at tsdf = 0 as (vertices (V, 3), faces (F, 3)).

    Crossings on edges with an unobserved endpoint are discarded.
    """
    if not np.any(volume.weight > 0):
        raise EmptyVolume("volume has no observed voxels")
    t = volume.tsdf
    if not (t.min() < 0.0 < t.max()):
        raise EmptyVolume("no zero crossing in the volume")
    try:
        verts, faces, _, _ = marching_cubes(t, level=0.0, allow_degenerate=False)
    except (ValueError, RuntimeError) as exc:
        raise EmptyVolume(str(exc)) from None
    dims = np.array(t.shape) - 1
    lo = np.clip(np.floor(verts).astype(np.int64), 0, dims)
    hi = np.clip(np.ceil(verts).astype(np.int64), 0, dims)
    w = volume.weight
    ok = (w[lo[:, 0], lo[:, 1], lo[:, 2]] > 0) & (w[hi[:, 0], hi[:, 1], hi[:, 2]] > 0)
    faces = faces[np.all(ok[faces], axis=1)]
    if len(faces) == 0:
        raise EmptyVolume("no observed zero crossing")
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = volume.origin + verts[used] * volume.voxel_size
    return verts, remap[faces]


def write_ply(path, vertices, faces) -> None:
    """Binary little-endian PLY with float32 positions and int32 triangle indices."""
    v = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    f = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(f)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    rec = np.empty(len(f), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    rec["n"] = 3
    rec["idx"] = f
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(v.tobytes())
        fh.write(rec.tobytes())


def read_ply(path):
    """Read a triangle PLY written by :func:`write_ply`."""
    data = open(path, "rb").read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    nv = nf = 0
    for ln in lines:
        if ln.startswith("element vertex"):
            nv = int(ln.split()[-1])
        elif ln.startswith("element face"):
            nf = int(ln.split()[-1])
    body = data[end + len(b"end_header\n"):]
    if len(body) != nv * 12 + nf * 13:
        raise FormatError(f"{path}: payload size mismatch")
    verts = np.frombuffer(body, dtype="<f4", count=nv * 3).reshape(nv, 3).astype(np.float64)
    rec = np.frombuffer(body, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=nv * 12)
    if nf and np.any(rec["n"] != 3):
        raise FormatError(f"{path}: non-triangle face")
    return verts, rec["idx"].astype(np.int64)


