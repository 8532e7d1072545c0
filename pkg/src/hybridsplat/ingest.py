"""Frame streams: on-disk dataset format, procedural street scenes, correspondences.

Dataset layout::

    intrinsics.txt                  fx fy cx cy W H
    frames/NNNNNN/rgb.png           8-bit RGB
    frames/NNNNNN/sparse_depth.txt  one "u v depth_m" per line
    frames/NNNNNN/pose.txt          4x4 row-major camera->world
    frames/NNNNNN/sky_mask.png      optional, nonzero = sky
    frames/NNNNNN/gt_depth.pfm      optional, synthetic ground truth

Cameras follow the pinhole convention x right, y down, z forward; pixel
(u, v) has its centre at coordinates (u, v).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from PIL import Image

from .errors import FormatError, MissingFrame


class Intrinsics(NamedTuple):
    fx: float
    fy: float
    cx: float
    cy: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class Frame:
    index: int
    rgb: np.ndarray                      # H x W x 3 in [0, 1]
    sparse_uv: np.ndarray                # M x 2 integer pixels (u, v)
    sparse_depth: np.ndarray             # M camera-frame z (m)
    pose: np.ndarray                     # 4 x 4 camera -> world
    intrinsics: Intrinsics
    sky_mask: Optional[np.ndarray] = None
    gt_depth: Optional[np.ndarray] = None

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def world_to_camera(self) -> np.ndarray:
        R, t = self.rotation, self.center
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out

    def validate(self) -> None:
        H, W = self.height, self.width
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise FormatError("rgb must be H x W x 3")
        R = self.rotation
        if (not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6
                or not np.allclose(self.pose[3], [0, 0, 0, 1])):
            raise FormatError("pose is not a rigid transform")
        if len(self.sparse_depth):
            if np.any(self.sparse_depth <= 0) or not np.all(np.isfinite(self.sparse_depth)):
                raise FormatError("sparse depth must be positive and finite")
            u, v = self.sparse_uv[:, 0], self.sparse_uv[:, 1]
            if np.any(u < 0) or np.any(u >= W) or np.any(v < 0) or np.any(v >= H):
                raise FormatError("sparse depth sample outside the image")
        if self.sky_mask is not None and self.sky_mask.shape != (H, W):
            raise FormatError("sky mask shape mismatch")

    def backproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """World points for pixels ``uv`` (N, 2) at camera-frame depths ``depth``."""
        K = self.intrinsics
        uv = np.asarray(uv, dtype=np.float64)
        cam = np.stack([(uv[:, 0] - K.cx) / K.fx * depth, (uv[:, 1] - K.cy) / K.fy * depth, depth], axis=-1)
        return cam @ self.rotation.T + self.center

    def project(self, points: np.ndarray):
        """Pixel coordinates (N, 2) and camera-frame depths (N,) of world points."""
        K = self.intrinsics
        cam = (np.asarray(points) - self.center) @ self.rotation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy], axis=-1)
        return uv, z

    def ray_directions(self, uv: np.ndarray) -> np.ndarray:
        """Unit world-frame ray directions through pixels ``uv``."""
        K = self.intrinsics
        uv = np.asarray(uv, dtype=np.float64)
        d = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))], axis=-1)
        d = d @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


# ---------------------------------------------------------------- image io

def write_pfm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype="<f4")
    color = image.ndim == 3
    H, W = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{W} {H}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        dims = re.match(rb"^(\d+)\s+(\d+)\s*$", fh.readline())
        if not dims:
            raise FormatError(f"{path}: bad PFM dimensions")
        W, H = int(dims.group(1)), int(dims.group(2))
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        shape = (H, W, 3) if header == b"PF" else (H, W)
        data = np.frombuffer(fh.read(), dtype=dtype)
        if data.size != int(np.prod(shape)):
            raise FormatError(f"{path}: truncated PFM data")
        return data.reshape(shape)[::-1].astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path)


# ---------------------------------------------------------------- dataset io

def frame_dir(root, index: int) -> Path:
    return Path(root) / "frames" / f"{index:06d}"


def write_intrinsics(root, K: Intrinsics, width: int, height: int) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    (Path(root) / "intrinsics.txt").write_text(
        f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {width} {height}\n")


def read_intrinsics(root):
    path = Path(root) / "intrinsics.txt"
    if not path.exists():
        raise FormatError(f"{path} missing")
    try:
        vals = path.read_text().split()
        fx, fy, cx, cy = (float(v) for v in vals[:4])
        W, H = int(vals[4]), int(vals[5])
    except (ValueError, IndexError):
        raise FormatError(f"{path}: expected 'fx fy cx cy W H'") from None
    return Intrinsics(fx, fy, cx, cy), W, H


def write_frame(root, frame: Frame) -> None:
    d = frame_dir(root, frame.index)
    d.mkdir(parents=True, exist_ok=True)
    write_png(d / "rgb.png", frame.rgb)
    with open(d / "sparse_depth.txt", "w") as fh:
        for (u, v), z in zip(frame.sparse_uv, frame.sparse_depth):
            fh.write(f"{int(u)} {int(v)} {float(z)!r}\n")
    with open(d / "pose.txt", "w") as fh:
        for row in frame.pose:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
    if frame.sky_mask is not None:
        Image.fromarray(frame.sky_mask.astype(np.uint8) * 255).save(d / "sky_mask.png")
    if frame.gt_depth is not None:
        write_pfm(d / "gt_depth.pfm", frame.gt_depth)


def read_frame(root, index: int) -> Frame:
    """Load frame ``index`` of the dataset at ``root``; validates all invariants."""
    d = frame_dir(root, index)
    if not (d / "rgb.png").exists():
        raise MissingFrame(index)
    K, W, H = read_intrinsics(root)
    try:
        with Image.open(d / "rgb.png") as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise FormatError(f"{d / 'rgb.png'}: {exc}") from None
    if rgb.shape[:2] != (H, W):
        raise FormatError(f"frame {index}: image is {rgb.shape[1]}x{rgb.shape[0]}, intrinsics say {W}x{H}")
    try:
        pose = np.loadtxt(d / "pose.txt", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise FormatError(f"frame {index}: bad pose file ({exc})") from None
    if pose.shape != (4, 4):
        raise FormatError(f"frame {index}: pose must be 4x4")
    uv = np.zeros((0, 2), dtype=np.int64)
    depth = np.zeros(0)
    sd = d / "sparse_depth.txt"
    if sd.exists() and sd.stat().st_size:
        try:
            arr = np.loadtxt(sd, dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise FormatError(f"frame {index}: bad sparse depth ({exc})") from None
        if arr.shape[1] != 3:
            raise FormatError(f"frame {index}: sparse depth lines must be 'u v depth'")
        uv = arr[:, :2].astype(np.int64)
        depth = arr[:, 2]
    sky = None
    if (d / "sky_mask.png").exists():
        with Image.open(d / "sky_mask.png") as im:
            sky = np.asarray(im.convert("L")) > 0
    gt = read_pfm(d / "gt_depth.pfm").astype(np.float64) if (d / "gt_depth.pfm").exists() else None
    frame = Frame(index, rgb, uv, depth, pose, K, sky, gt)
    frame.validate()
    return frame


def count_frames(root) -> int:
    n = 0
    while (frame_dir(root, n) / "rgb.png").exists():
        n += 1
    return n


def read_dataset(root) -> list:
    n = count_frames(root)
    if n == 0:
        raise MissingFrame(0)
    return [read_frame(root, i) for i in range(n)]


# ---------------------------------------------------------------- synthetic scenes

SKY_HORIZON = np.array([0.78, 0.86, 0.95])
SKY_ZENITH = np.array([0.30, 0.50, 0.85])


@dataclass
class _Box:
    lo: np.ndarray
    hi: np.ndarray
    color: np.ndarray


@dataclass
class _Ellipsoid:
    center: np.ndarray
    radii: np.ndarray
    color: np.ndarray


class StreetScene:
    """Analytic street: ground y=0, roadside boxes/ellipsoids, a far backdrop and a sky dome.

    ``ground_slope`` (radians) tilts the ground about the x axis beyond
    ``ramp_start`` (metres along z) to make a ramp.
    """

    def __init__(self, seed: int, n_objects: Optional[int] = None, ground_slope: float = 0.0,
                 ramp_start: float = 15.0, far_z: float = 70.0):
        rng = np.random.default_rng(seed)
        self.ground_slope = ground_slope
        self.ramp_start = ramp_start
        self.objects = []
        n = int(rng.integers(5, 21)) if n_objects is None else n_objects
        for k in range(n):
            side = -1.0 if k % 2 == 0 else 1.0
            x = side * rng.uniform(4.0, 9.0)
            z = rng.uniform(8.0, 50.0)
            color = rng.uniform(0.15, 0.9, size=3)
            if rng.random() < 0.6:
                half = np.array([rng.uniform(0.8, 2.0), 0.0, rng.uniform(0.8, 2.5)])
                height = rng.uniform(1.5, 6.0)
                lo = np.array([x - half[0], 0.0, z - half[2]])
                hi = np.array([x + half[0], height, z + half[2]])
                self.objects.append(_Box(lo, hi, color))
            else:
                radii = np.array([rng.uniform(0.8, 1.8), rng.uniform(1.0, 3.0), rng.uniform(0.8, 1.8)])
                self.objects.append(_Ellipsoid(np.array([x, radii[1], z]), radii, color))
        # backdrop wall keeps every below-horizon ray bounded
        self.objects.append(_Box(np.array([-80.0, 0.0, far_z]), np.array([80.0, 14.0, far_z + 2.0]),
                                 np.array([0.55, 0.5, 0.45])))
        self.ground_color = np.array([0.38, 0.38, 0.40])

    def ground_height(self, z):
        return np.where(z > self.ramp_start, (z - self.ramp_start) * np.tan(self.ground_slope), 0.0)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray):
        """Closest hit distance t, surface normal and albedo for each ray; t = inf for sky."""
        n = len(dirs)
        best_t = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        albedo = np.zeros((n, 3))
        kind = np.full(n, -1)
        # ground, piecewise planar
        for plane_id, (nrm, d0) in enumerate(self._ground_planes()):
            denom = dirs @ nrm
            with np.errstate(divide="ignore", invalid="ignore"):
                t = -(origins @ nrm + d0) / denom
            hit = (denom < -1e-12) & (t > 1e-6)
            p = origins + t[:, None] * dirs
            if self.ground_slope != 0.0:
                hit &= (p[:, 2] > self.ramp_start) if plane_id == 1 else (p[:, 2] <= self.ramp_start)
            better = hit & (t < best_t)
            best_t[better] = t[better]
            normal[better] = nrm
            kind[better] = 0
        for obj in self.objects:
            if isinstance(obj, _Box):
                t, nrm = _ray_box(origins, dirs, obj.lo, obj.hi)
            else:
                t, nrm = _ray_ellipsoid(origins, dirs, obj.center, obj.radii)
            better = t < best_t
            best_t[better] = t[better]
            normal[better] = nrm[better]
            albedo[better] = obj.color
            kind[better] = 1
        pts = origins + np.where(np.isfinite(best_t), best_t, 0.0)[:, None] * dirs
        g = kind == 0
        albedo[g] = self._ground_albedo(pts[g])
        return best_t, normal, albedo, kind

    def _ground_planes(self):
        planes = [(np.array([0.0, 1.0, 0.0]), 0.0)]
        if self.ground_slope != 0.0:
            s, c = np.sin(self.ground_slope), np.cos(self.ground_slope)
            nrm = np.array([0.0, c, -s])
            planes.append((nrm, s * self.ramp_start))
        return planes

    def _ground_albedo(self, p):
        base = np.tile(self.ground_color, (len(p), 1))
        check = (np.floor(p[:, 0] / 1.5) + np.floor(p[:, 2] / 1.5)) % 2
        base = base + 0.04 * (check[:, None] - 0.5)
        stripe = (np.abs(p[:, 0]) < 0.12) & ((np.floor(p[:, 2] / 3.0) % 2) == 0)
        base[stripe] = np.array([0.92, 0.9, 0.75])
        return base

    def shade(self, dirs, t, normal, albedo, kind):
        light = np.array([0.3, 0.85, -0.4])
        light /= np.linalg.norm(light)
        lam = 0.55 + 0.45 * np.clip(normal @ light, 0.0, 1.0)
        rgb = albedo * lam[:, None]
        sky = kind < 0
        rgb[sky] = sky_color(dirs[sky])
        return np.clip(rgb, 0.0, 1.0)


def sky_color(dirs: np.ndarray) -> np.ndarray:
    elev = np.clip(dirs[:, 1], 0.0, 1.0)
    w = np.sqrt(elev)[:, None]
    return (1 - w) * SKY_HORIZON + w * SKY_ZENITH


def _ray_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-6)
    t = np.where(hit, t_near, np.inf)
    axis = tmin.argmax(axis=1)
    nrm = np.zeros_like(o)
    nrm[np.arange(len(o)), axis] = -np.sign(d[np.arange(len(o)), axis])
    return t, nrm


def _ray_ellipsoid(o, d, c, r):
    oc = (o - c) / r
    dd = d / r
    a = np.sum(dd * dd, axis=1)
    b = 2 * np.sum(oc * dd, axis=1)
    cc = np.sum(oc * oc, axis=1) - 1.0
    disc = b * b - 4 * a * cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit = ok & (t > 1e-6)
    t = np.where(hit, t, np.inf)
    p = o + np.where(hit, t, 0.0)[:, None] * d
    nrm = (p - c) / (r * r)
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
    return t, nrm


def look_pose(position, yaw: float, pitch: float = 0.0) -> np.ndarray:
    """Camera->world pose for a y-up world; yaw about +y, zero yaw looks down +z."""
    cy_, sy_ = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    forward = np.array([sy_ * cp, sp, cy_ * cp])
    down = np.array([sy_ * sp, -cp, cy_ * sp])
    right = np.cross(down, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = forward
    pose[:3, 3] = position
    return pose


def street_trajectory(n_frames: int, step: float = 0.8, height: float = 1.5):
    poses = []
    for t in range(n_frames):
        x = 0.1 * np.sin(0.35 * t)
        yaw = 0.02 * np.sin(0.5 * t)
        poses.append(look_pose(np.array([x, height, step * t]), yaw))
    return poses


def default_intrinsics(H: int, W: int) -> Intrinsics:
    f = 0.8 * W
    return Intrinsics(f, f, (W - 1) / 2.0, (H - 1) / 2.0)


def lidar_rows(H: int, cy: float, row_step: int = 3, offset: int = 6):
    """Rows sampled by the simulated LiDAR: every ``row_step`` rows below the pitch cutoff."""
    cutoff = int(np.ceil(cy)) + offset
    return np.arange(cutoff, H, row_step), cutoff


def render_street_frame(scene: StreetScene, pose: np.ndarray, K: Intrinsics, H: int, W: int,
                        index: int = 0, supersample: int = 3, col_step: int = 2) -> Frame:
    """Ray-cast one frame: anti-aliased RGB, exact z-depth at pixel centres, sky mask, LiDAR."""
    R, c = pose[:3, :3], pose[:3, 3]
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    # centre rays give depth and sky mask
    dirs_cam = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ R.T
    norm = np.linalg.norm(dirs, axis=1)
    t, _, _, kind = scene.intersect(np.tile(c, (len(dirs), 1)), dirs / norm[:, None])
    depth = np.where(np.isfinite(t), t / norm, np.inf).reshape(H, W)
    sky = (kind < 0).reshape(H, W)
    # supersampled colour
    acc = np.zeros((H * W, 3))
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    for oy in offs:
        for ox in offs:
            dc = np.stack([(uu + ox - K.cx) / K.fx, (vv + oy - K.cy) / K.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
            dw = dc @ R.T
            dw /= np.linalg.norm(dw, axis=1, keepdims=True)
            ts, nrm, alb, kd = scene.intersect(np.tile(c, (len(dw), 1)), dw)
            acc += scene.shade(dw, ts, nrm, alb, kd)
    rgb = (acc / supersample ** 2).reshape(H, W, 3)
    rows, _ = lidar_rows(H, K.cy)
    vs, us = np.meshgrid(rows, np.arange(0, W, col_step), indexing="ij")
    uv = np.stack([us.ravel(), vs.ravel()], axis=-1)
    z = depth[uv[:, 1], uv[:, 0]]
    keep = np.isfinite(z) & (z < 60.0)
    gt = np.where(sky, 0.0, depth)
    return Frame(index, rgb, uv[keep].astype(np.int64), z[keep], pose, K, sky, gt)


def synth_scene(seed: int, n_frames: int, resolution=(128, 128), out_dir=None,
                n_objects: Optional[int] = None, ground_slope: float = 0.0):
    """Generate a procedural street sequence; optionally write it as a dataset.

    Returns the list of frames (RGB quantised to 8 bits exactly as stored on
    disk) together with the analytic :class:`StreetScene`.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    H, W = resolution
    scene = StreetScene(seed, n_objects=n_objects, ground_slope=ground_slope)
    K = default_intrinsics(H, W)
    frames = []
    for i, pose in enumerate(street_trajectory(n_frames)):
        f = render_street_frame(scene, pose, K, H, W, index=i)
        f.rgb = to_uint8(f.rgb).astype(np.float64) / 255.0
        frames.append(f)
    if out_dir is not None:
        write_intrinsics(out_dir, K, W, H)
        for f in frames:
            write_frame(out_dir, f)
    return frames, scene


# ---------------------------------------------------------------- correspondences

@dataclass
class Correspondences:
    """Matched pixels between two frames; ``flow`` is the displacement length."""

    pixel_t: np.ndarray
    pixel_t1: np.ndarray

    @property
    def flow(self) -> np.ndarray:
        return np.linalg.norm(self.pixel_t1 - self.pixel_t, axis=-1)

    def __len__(self) -> int:
        return len(self.pixel_t)

    def subset(self, mask) -> "Correspondences":
        return Correspondences(self.pixel_t[mask], self.pixel_t1[mask])

    @classmethod
    def empty(cls) -> "Correspondences":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)))


def warp_pixels(frame_t: Frame, frame_t1: Frame, uv: np.ndarray, depth: np.ndarray):
    """Reproject pixels of ``frame_t`` with known depth into ``frame_t1``."""
    return frame_t1.project(frame_t.backproject(uv, depth))


def match_ground_truth(frame_t: Frame, frame_t1: Frame, stride: int = 3,
                       depth_tolerance: float = 0.02) -> Correspondences:
    """Exact correspondences from ground-truth depth (synthetic data only).

    Samples non-sky pixels of ``frame_t`` on a ``stride`` grid, warps them into
    ``frame_t1`` and keeps the ones that land inside the image and are not
    occluded there (relative depth agreement within ``depth_tolerance``).
    """
    if frame_t.gt_depth is None or frame_t1.gt_depth is None:
        raise ValueError("ground-truth matching needs gt_depth on both frames")
    H, W = frame_t.height, frame_t.width
    vs, us = np.mgrid[stride // 2:H:stride, stride // 2:W:stride]
    uv = np.stack([us.ravel(), vs.ravel()], axis=-1).astype(np.float64)
    d = frame_t.gt_depth[vs.ravel(), us.ravel()]
    ok = d > 0
    if frame_t.sky_mask is not None:
        ok &= ~frame_t.sky_mask[vs.ravel(), us.ravel()]
    uv, d = uv[ok], d[ok]
    uv1, z1 = warp_pixels(frame_t, frame_t1, uv, d)
    inside = (z1 > 0) & (uv1[:, 0] >= 0) & (uv1[:, 0] <= W - 1) & (uv1[:, 1] >= 0) & (uv1[:, 1] <= H - 1)
    uv, uv1, z1 = uv[inside], uv1[inside], z1[inside]
    ref = frame_t1.gt_depth[np.round(uv1[:, 1]).astype(int), np.round(uv1[:, 0]).astype(int)]
    visible = np.abs(ref - z1) < depth_tolerance * z1
    return Correspondences(uv[visible], uv1[visible])


def harris_corners(gray: np.ndarray, max_corners: int = 400, min_distance: int = 4,
                   border: int = 8) -> np.ndarray:
    from skimage.feature import corner_harris, corner_peaks

    if np.ptp(gray) < 1e-6:
        return np.zeros((0, 2), dtype=np.int64)
    response = corner_harris(gray, sigma=1.0)
    peaks = corner_peaks(response, min_distance=min_distance, threshold_rel=1e-4,
                         exclude_border=border, num_peaks=max_corners)
    return peaks[:, ::-1].astype(np.int64)  # (u, v)


def match_ncc(frame_t: Frame, frame_t1: Frame, radius: int = 20, half: int = 5,
              min_score: float = 0.9, ratio: float = 0.97) -> Correspondences:
    """Harris corners in ``frame_t`` matched by zero-mean NCC in a search window of ``frame_t1``.

    A match is kept when its score exceeds ``min_score`` and the runner-up
    peak (outside a 2 px neighbourhood) scores below ``ratio`` times it. The
    integer peak is refined with a 1D parabola fit on each axis.
    """
    g0 = frame_t.rgb.mean(axis=2)
    g1 = frame_t1.rgb.mean(axis=2)
    H, W = g0.shape
    corners = harris_corners(g0, border=half + 1)
    if len(corners) == 0:
        return Correspondences.empty()
    from numpy.lib.stride_tricks import sliding_window_view

    size = 2 * half + 1
    windows = sliding_window_view(g1, (size, size))          # (H-2h, W-2h, s, s)
    wmean = windows.mean(axis=(2, 3))
    wstd = windows.std(axis=(2, 3))
    src, dst = [], []
    for u, v in corners:
        patch = g0[v - half:v + half + 1, u - half:u + half + 1]
        p = patch - patch.mean()
        pstd = p.std()
        if pstd < 1e-3:
            continue
        v0, v1 = max(half, v - radius), min(H - half - 1, v + radius)
        u0, u1 = max(half, u - radius), min(W - half - 1, u + radius)
        cand = windows[v0 - half:v1 - half + 1, u0 - half:u1 - half + 1]
        num = np.einsum("ijkl,kl->ij", cand, p) / size ** 2
        den = wstd[v0 - half:v1 - half + 1, u0 - half:u1 - half + 1] * pstd
        score = np.where(den > 1e-6, num / np.maximum(den, 1e-12), -1.0)
        iy, ix = np.unravel_index(np.argmax(score), score.shape)
        best = score[iy, ix]
        if best < min_score:
            continue
        masked = score.copy()
        masked[max(0, iy - 2):iy + 3, max(0, ix - 2):ix + 3] = -1.0
        if masked.max() > ratio * best:
            continue
        # a perfect correlation is an exact integer match
        refine = best < 1.0 - 1e-9
        dy = _parabola_peak(score, iy, ix, axis=0) if refine else 0.0
        dx = _parabola_peak(score, iy, ix, axis=1) if refine else 0.0
        src.append((u, v))
        dst.append((u0 + ix + dx, v0 + iy + dy))
    if not src:
        return Correspondences.empty()
    return Correspondences(np.asarray(src, dtype=np.float64), np.asarray(dst, dtype=np.float64))


def _parabola_peak(score, iy, ix, axis):
    n = score.shape[axis]
    i = iy if axis == 0 else ix
    if i == 0 or i == n - 1:
        return 0.0
    if axis == 0:
        a, b, c = score[iy - 1, ix], score[iy, ix], score[iy + 1, ix]
    else:
        a, b, c = score[iy, ix - 1], score[iy, ix], score[iy, ix + 1]
    den = a - 2 * b + c
    if abs(den) < 1e-12:
        return 0.0
    return float(np.clip(0.5 * (a - c) / den, -0.5, 0.5))


def match_features(frame_t: Frame, frame_t1: Frame, method: str = "auto", stride: int = 3) -> Correspondences:
    """Correspondences between adjacent frames; empty when nothing matches.

    ``auto`` uses ground-truth warping when both frames carry ``gt_depth``
    and NCC patch matching otherwise.
    """
    if method == "auto":
        method = "gt" if frame_t.gt_depth is not None and frame_t1.gt_depth is not None else "ncc"
    if method == "gt":
        return match_ground_truth(frame_t, frame_t1, stride=stride)
    if method == "ncc":
        return match_ncc(frame_t, frame_t1)
    raise ValueError(f"unknown matcher {method!r}")
