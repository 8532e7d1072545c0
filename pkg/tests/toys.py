"""Small hand-built scenes and frames shared by the tests."""
from __future__ import annotations

import numpy as np

from hybridsplat.config import SceneConfig
from hybridsplat.ingest import Frame, Intrinsics, look_pose
from hybridsplat.scene import FreeGaussians, HybridScene, PlaneGaussians, PlaneSegment, SphereGaussians


def pinhole(f: float = 30.0, H: int = 32, W: int = 32) -> Intrinsics:
    return Intrinsics(f, f, (W - 1) / 2.0, (H - 1) / 2.0)


def make_frame(H=32, W=32, f=30.0, pose=None, rgb=None, index=0, sparse_uv=None, sparse_depth=None,
               sky_mask=None, gt_depth=None) -> Frame:
    pose = np.eye(4) if pose is None else pose
    rgb = np.zeros((H, W, 3)) if rgb is None else rgb
    uv = np.zeros((0, 2), dtype=np.int64) if sparse_uv is None else np.asarray(sparse_uv, dtype=np.int64)
    d = np.zeros(0) if sparse_depth is None else np.asarray(sparse_depth, dtype=np.float64)
    return Frame(index, rgb, uv, d, pose, pinhole(f, H, W), sky_mask, gt_depth)


def free_gaussians(position, scale, color=None, opacity=None, rotation=None) -> FreeGaussians:
    position = np.atleast_2d(np.asarray(position, dtype=np.float64))
    n = len(position)
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n, 3))
    return FreeGaussians(
        position=position.copy(), log_scale=np.log(scale).copy(),
        color=np.full((n, 3), 0.5) if color is None else np.array(color, dtype=np.float64).reshape(n, 3),
        rotation=np.tile([1.0, 0, 0, 0], (n, 1)) if rotation is None else np.array(rotation, dtype=np.float64),
        opacity=np.zeros(n) if opacity is None else np.array(opacity, dtype=np.float64).reshape(n),
    )


def five_gaussian_scene(seed: int = 1):
    """Two free, one road and two sky Gaussians in front of a 32x32 camera; returns (scene, frame)."""
    rng = np.random.default_rng(seed)
    cfg = SceneConfig(sky_radius=50.0, sky_thickness=0.5, plane_thickness=0.05)
    sc = HybridScene(config=cfg)
    sc.free = FreeGaussians(
        position=np.array([[0.3, 1.6, 5.0], [-0.5, 1.2, 7.0]]),
        log_scale=np.log(np.array([[0.4, 0.3, 0.5], [0.6, 0.5, 0.4]])),
        color=rng.uniform(size=(2, 3)), rotation=rng.normal(size=(2, 4)), opacity=np.array([0.3, -0.2]))
    sc.segments = [PlaneSegment(np.array([0.05, 1.0, 0.03, 0.0]))]
    sc.inlier = PlaneGaussians(xz=np.array([[0.2, 4.0]]), log_scale=np.log([[0.6, 0.8]]),
                               color=rng.uniform(size=(1, 3)), opacity=np.array([0.5]),
                               segment_id=np.array([0]))
    sc.sky = SphereGaussians(xz=np.array([[2.0, 40.0], [-4.0, 38.0]]), log_scale=np.log([[6.0, 5.0], [5.0, 7.0]]),
                             color=rng.uniform(size=(2, 3)), opacity=np.array([1.0, 0.4]))
    pose = look_pose(np.array([0.1, 1.5, 0.0]), 0.05, 0.15)
    return sc, make_frame(pose=pose)


def street_pose(z: float = 0.0, height: float = 1.5):
    return look_pose(np.array([0.0, height, z]), 0.0)


def random_ordered_scene(rng, n_free=6, n_inlier=4, n_sky=3, H=32, W=32, f=30.0):
    """Scene respecting the family depth ordering: free nearer than road nearer than sky.

    The camera looks down +z from the origin; free Gaussians sit at z in
    [3, 6], road Gaussians on the plane y = -2 at z in [8, 12] and the
    sky at R = 200.
    """
    cfg = SceneConfig(sky_radius=200.0, sky_thickness=1.0, plane_thickness=0.05)
    sc = HybridScene(config=cfg)
    z = rng.uniform(3.0, 6.0, n_free)
    xy = rng.uniform(-0.5, 0.5, (n_free, 2)) * z[:, None]
    sc.free = free_gaussians(np.column_stack([xy, z]), rng.uniform(0.05, 0.4, (n_free, 3)),
                             rng.uniform(size=(n_free, 3)), rng.normal(0.0, 1.0, n_free),
                             rng.normal(size=(n_free, 4)))
    sc.segments = [PlaneSegment(np.array([0.0, 1.0, 0.0, 2.0]))]
    # road inserted near-to-far, so insertion order is also depth order
    zi = np.sort(rng.uniform(8.0, 12.0, n_inlier))
    sc.inlier = PlaneGaussians(xz=np.column_stack([rng.uniform(-1, 1, n_inlier), zi]),
                               log_scale=np.log(rng.uniform(0.2, 0.6, (n_inlier, 2))),
                               color=rng.uniform(size=(n_inlier, 3)), opacity=rng.normal(0, 1, n_inlier),
                               segment_id=np.zeros(n_inlier, dtype=np.int64))
    # sky directions roughly ahead and above the horizon
    az = rng.uniform(-0.4, 0.4, n_sky)
    el = rng.uniform(0.05, 0.4, n_sky)
    d = np.column_stack([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
    sc.sky = SphereGaussians(xz=200.0 * d[:, [0, 2]], log_scale=np.log(rng.uniform(5, 20, (n_sky, 2))),
                             color=rng.uniform(size=(n_sky, 3)), opacity=rng.normal(0, 1, n_sky))
    return sc, make_frame(H, W, f, pose=look_pose(np.zeros(3), 0.0))


def oracle_render(splats, rect, H, W, tile=16, t_min=1e-4):
    """Per-pixel reference compositor with one global depth sort (stable).

    ``splats`` and ``rect`` come from the projection step; a primitive is a
    candidate for a pixel when its tile rectangle covers the pixel's tile.
    """
    order = np.argsort(splats.depth, kind="stable")
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    sil = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            tx, ty = u // tile, v // tile
            T = 1.0
            for i in order:
                x0, x1, y0, y1 = rect[i]
                if not (x0 <= tx <= x1 and y0 <= ty <= y1):
                    continue
                if T < t_min:
                    break
                dx = u - splats.mean2d[i, 0]
                dy = v - splats.mean2d[i, 1]
                a, b, c = splats.conic[i]
                power = -0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy)
                f = splats.opacity[i] * np.exp(power)
                color[v, u] += splats.color[i] * f * T
                depth[v, u] += splats.depth[i] * f * T
                sil[v, u] += f * T
                T *= 1.0 - f
    return color, depth, sil


def finite_difference_check(scene, frame, h=1e-4, seed=0):
    """Relative errors of analytic vs central-difference gradients for every learnable scalar.

    The probe loss is a fixed random linear functional of colour, depth and
    silhouette, which exercises all three adjoint channels.
    """
    from hybridsplat.raster import backward, render

    rng = np.random.default_rng(seed)
    H, W = frame.height, frame.width
    gC = rng.normal(size=(H, W, 3))
    gD = 0.1 * rng.normal(size=(H, W))
    gS = rng.normal(size=(H, W))

    def loss(s):
        o = render(s, frame)
        return (o.color * gC).sum() + (o.depth * gD).sum() + (o.silhouette * gS).sum()

    out = render(scene, frame)
    buf = backward(scene, frame, out, gC, gD, gS)
    rel, names = [], []
    for fam_name in ("free", "inlier", "sky"):
        fam = scene.family(fam_name)
        gfam = buf.families()[fam_name]
        for key, arr in fam.learnable_arrays().items():
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                lp = loss(scene)
                arr[idx] = orig - h
                lm = loss(scene)
                arr[idx] = orig
                num = (lp - lm) / (2 * h)
                an = getattr(gfam, key)[idx]
                rel.append(abs(an - num) / max(abs(an), abs(num), 1e-6))
                names.append((fam_name, key, idx))
    return np.asarray(rel), names


# ---------------------------------------------------------------- analytic surfaces

MESH_K = pinhole(40.0, 48, 48)


def look_at(eye, target):
    """Camera-to-world pose with the optical axis (column 2) from eye to target."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    a = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(a, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    pose = np.eye(4)
    pose[:3, :3] = np.column_stack([x, y, z])
    pose[:3, 3] = eye
    return pose


def rays(pose, k=None, H=48, W=48):
    k = MESH_K if k is None else k
    v, u = np.mgrid[0:H, 0:W]
    cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones((H, W))], -1)
    return cam @ pose[:3, :3].T  # world directions with unit z-component in the camera


def plane_depth(pose, max_depth=20.0, k=None, H=48, W=48):
    """z-depth of y = 0 seen from ``pose``; 0 where the ray misses or runs past max_depth."""
    d = rays(pose, k, H, W)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -pose[1, 3] / d[..., 1]
    return np.where((t > 0) & (t < max_depth), t, 0.0)


def sphere_depth(pose, r=1.0):
    """z-depth of the origin-centred sphere of radius ``r``; 0 where the ray misses."""
    d = rays(pose)
    o = pose[:3, 3]
    a = np.sum(d * d, -1)
    b = 2 * d @ o
    c = o @ o - r * r
    disc = b * b - 4 * a * c
    t = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
    return np.where(disc > 0, t, 0.0)


def sphere_views():
    dirs = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
    dirs += [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    return [look_at(4.0 * np.array(d) / np.linalg.norm(d), [0.0, 0.0, 0.0]) for d in dirs]


# ---------------------------------------------------------------- point clouds

def angle_deg(a, b):
    return np.degrees(np.arccos(np.clip(abs(np.dot(a, b)) / np.linalg.norm(a) / np.linalg.norm(b), -1, 1)))


def noisy_ground(rng, n=500, outlier_frac=0.2, sigma=0.0, normal=(0, 1, 0), offset=0.0):
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    m = int(n * (1 - outlier_frac))
    xz = rng.uniform(-10, 10, (m, 2))
    # y from the plane equation n.p + offset = 0
    y = -(normal[0] * xz[:, 0] + normal[2] * xz[:, 1] + offset) / normal[1]
    plane = np.column_stack([xz[:, 0], y, xz[:, 1]]) + rng.normal(0, sigma, (m, 1)) * normal
    out = rng.uniform([-10, 0.5, -10], [10, 5, 10], (n - m, 3))
    return np.vstack([plane, out]), m
