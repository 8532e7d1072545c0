"""Hybrid Gaussian scene: free 3D Gaussians, sky-sphere Gaussians, road-plane Gaussians.

Every family is stored as a struct of arrays. Constrained families keep only
their learnable degrees of freedom; :func:`lift_sphere` and :func:`lift_plane`
turn those into full (position, rotation, scale) triples, and the matching
``*_backward`` functions contract gradients on the lifted quantities back onto
the learnables.

Conventions: world frame is y-up, quaternions are (w, x, y, z), scales are
stored as logs and opacities as logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from .config import SceneConfig
from .errors import DomainError

Y_AXIS = np.array([0.0, 1.0, 0.0])
DISC_MARGIN = 0.999


# ---------------------------------------------------------------- quaternions

def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions ``q`` of shape (N, 4) -> (N, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the (unit) quaternion components given dL/dR."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
              - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
              + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
              + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
              + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
              + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
              + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([dw, dx, dy, dz], axis=-1)


def normalize_backward(raw: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    """Chain rule through ``v / |v|`` along the last axis."""
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    unit = raw / norm
    return (d_unit - unit * np.sum(unit * d_unit, axis=-1, keepdims=True)) / norm


def quat_align_y(n: np.ndarray) -> np.ndarray:
    """Unit quaternions rotating the +y axis onto unit vectors ``n`` (N, 3).

    Half-way construction (1 + y.n, y x n) normalised; its axis is
    (n_z, 0, -n_x) and its angle arccos(n_y). Undefined only at n = -y.
    """
    raw = _align_y_raw(n)
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True)


def _align_y_raw(n):
    n = np.asarray(n, dtype=np.float64)
    return np.stack([1.0 + n[..., 1], n[..., 2], np.zeros_like(n[..., 0]), -n[..., 0]], axis=-1)


def quat_align_y_backward(n: np.ndarray, d_quat: np.ndarray) -> np.ndarray:
    d_raw = normalize_backward(_align_y_raw(n), d_quat)
    return np.stack([-d_raw[..., 3], d_raw[..., 0], d_raw[..., 1]], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply quaternion ``q`` to vector ``v`` via the Hamilton product q v q*."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w, u = q[..., :1], q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def materialize_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for unit quaternions (N, 4) and scales (N, 3)."""
    rotation = np.asarray(rotation, dtype=np.float64)
    single = rotation.ndim == 1
    R = quat_to_rotmat(np.atleast_2d(rotation))
    M = R * np.atleast_2d(scale)[:, None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return cov[0] if single else cov


# ---------------------------------------------------------------- lifting

def lift_sphere(xz, log_scale_xz, radius: float, thickness: float):
    """Lift sky-frame (x, z) onto the upper sphere of ``radius``.

    Returns sky-frame positions (N, 3), unit quaternions whose +y axis is the
    outward radial direction, and scales (exp(s_x), thickness, exp(s_z)).
    """
    xz = np.atleast_2d(np.asarray(xz, dtype=np.float64))
    r2 = np.sum(xz * xz, axis=-1)
    if np.any(r2 >= radius * radius):
        raise DomainError("sky xz outside the sphere disc")
    y = np.sqrt(radius * radius - r2)
    pos = np.stack([xz[:, 0], y, xz[:, 1]], axis=-1)
    quat = quat_align_y(pos / radius)
    ls = np.atleast_2d(np.asarray(log_scale_xz, dtype=np.float64))
    scale = np.stack([np.exp(ls[:, 0]), np.full(len(xz), thickness), np.exp(ls[:, 1])], axis=-1)
    return pos, quat, scale


def lift_sphere_backward(xz, radius: float, d_pos, d_quat):
    """Contract dL/d(position, quaternion) of lifted sky Gaussians onto dL/d(x, z)."""
    xz = np.atleast_2d(np.asarray(xz, dtype=np.float64))
    y = np.sqrt(radius * radius - np.sum(xz * xz, axis=-1))
    n = np.stack([xz[:, 0], y, xz[:, 1]], axis=-1) / radius
    d_p = d_pos + quat_align_y_backward(n, d_quat) / radius
    # dy/dx = -x/y, dy/dz = -z/y
    gx = d_p[:, 0] - d_p[:, 1] * xz[:, 0] / y
    gz = d_p[:, 2] - d_p[:, 1] * xz[:, 1] / y
    return np.stack([gx, gz], axis=-1)


def lift_plane(xz, log_scale_xz, coefficients, thickness: float):
    """Lift (x, z) onto planes A x + B y + C z + D = 0.

    ``coefficients`` is (4,) or per-Gaussian (N, 4). The rotation maps +y
    onto the plane's unit normal; scale is (exp(s_x), thickness, exp(s_z)).
    """
    xz = np.atleast_2d(np.asarray(xz, dtype=np.float64))
    coef = np.broadcast_to(np.asarray(coefficients, dtype=np.float64), (len(xz), 4))
    A, B, C, D = coef.T
    if np.any(np.abs(B) < 1e-9):
        raise DomainError("plane is vertical (|B| < 1e-9)")
    y = (-A * xz[:, 0] - C * xz[:, 1] - D) / B
    pos = np.stack([xz[:, 0], y, xz[:, 1]], axis=-1)
    normal = coef[:, :3] / np.linalg.norm(coef[:, :3], axis=-1, keepdims=True)
    quat = quat_align_y(normal)
    ls = np.atleast_2d(np.asarray(log_scale_xz, dtype=np.float64))
    scale = np.stack([np.exp(ls[:, 0]), np.full(len(xz), thickness), np.exp(ls[:, 1])], axis=-1)
    return pos, quat, scale


def lift_plane_backward(coefficients, d_pos):
    coef = np.broadcast_to(np.asarray(coefficients, dtype=np.float64), (len(d_pos), 4))
    A, B, C = coef[:, 0], coef[:, 1], coef[:, 2]
    gx = d_pos[:, 0] - d_pos[:, 1] * A / B
    gz = d_pos[:, 2] - d_pos[:, 1] * C / B
    return np.stack([gx, gz], axis=-1)


def project_to_disc(xz: np.ndarray, radius: float) -> np.ndarray:
    """Pull sky xz that drifted to or past the disc rim back to 0.999 R."""
    r = np.linalg.norm(xz, axis=-1)
    limit = DISC_MARGIN * radius
    out = xz.copy()
    bad = r >= limit
    out[bad] *= (limit / r[bad])[:, None]
    return out


# ---------------------------------------------------------------- families

class _Family:
    """Struct-of-arrays container; subclasses list their array fields."""

    array_fields: ClassVar[tuple] = ()
    n_learnables: ClassVar[int] = 0

    def __len__(self) -> int:
        return len(getattr(self, self.array_fields[0]))

    def subset(self, index):
        return type(self)(**{k: getattr(self, k)[index].copy() for k in self.array_fields})

    def keep(self, mask) -> None:
        for k in self.array_fields:
            setattr(self, k, getattr(self, k)[mask])

    def extend(self, other) -> None:
        for k in self.array_fields:
            setattr(self, k, np.concatenate([getattr(self, k), getattr(other, k)]))

    def copy(self):
        return self.subset(slice(None))

    def learnable_arrays(self) -> dict:
        return {k: getattr(self, k) for k in self.array_fields if k != "segment_id"}


@dataclass
class FreeGaussians(_Family):
    """Unconstrained ellipsoids: position, log-scale, color, quaternion, opacity logit."""

    position: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rotation: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    opacity: np.ndarray = field(default_factory=lambda: np.zeros(0))

    array_fields: ClassVar[tuple] = ("position", "log_scale", "color", "rotation", "opacity")
    n_learnables: ClassVar[int] = 14


@dataclass
class SphereGaussians(_Family):
    """Sky Gaussians: 2-DOF position on the camera-centred sphere."""

    xz: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity: np.ndarray = field(default_factory=lambda: np.zeros(0))

    array_fields: ClassVar[tuple] = ("xz", "log_scale", "color", "opacity")
    n_learnables: ClassVar[int] = 8


@dataclass
class PlaneGaussians(_Family):
    """Road Gaussians: 2-DOF position on the plane of ``segments[segment_id]``."""

    xz: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    segment_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    array_fields: ClassVar[tuple] = ("xz", "log_scale", "color", "opacity", "segment_id")
    n_learnables: ClassVar[int] = 8


@dataclass
class PlaneSegment:
    """Road plane (A, B, C, D) with unit normal, valid between two keyframe indices."""

    coefficients: np.ndarray
    valid_range: tuple = (0, 0)

    def __post_init__(self):
        self.coefficients = canonical_plane(self.coefficients)

    @property
    def normal(self) -> np.ndarray:
        return self.coefficients[:3]

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(points) @ self.coefficients[:3] + self.coefficients[3])

    def contains(self, frame_index: int) -> bool:
        return self.valid_range[0] <= frame_index <= self.valid_range[1]


def canonical_plane(coefficients) -> np.ndarray:
    """Scale so |(A, B, C)| = 1 and flip so the normal points into +y."""
    c = np.asarray(coefficients, dtype=np.float64).copy()
    c /= np.linalg.norm(c[:3])
    if c[1] < 0:
        c = -c
    return c


@dataclass
class HybridScene:
    free: FreeGaussians = field(default_factory=FreeGaussians)
    sky: SphereGaussians = field(default_factory=SphereGaussians)
    inlier: PlaneGaussians = field(default_factory=PlaneGaussians)
    segments: list = field(default_factory=list)
    config: SceneConfig = field(default_factory=SceneConfig)
    # spatial extent used for learning-rate scaling and split decisions (m)
    extent: float = 1.0
    # bumped on every mutation; renders remember it so stale backward calls fail
    version: int = 0

    def touch(self) -> None:
        self.version += 1

    def counts(self) -> dict:
        return {"free": len(self.free), "inlier": len(self.inlier), "sky": len(self.sky)}

    def __len__(self) -> int:
        return len(self.free) + len(self.inlier) + len(self.sky)

    def copy(self) -> "HybridScene":
        return HybridScene(
            free=self.free.copy(), sky=self.sky.copy(), inlier=self.inlier.copy(),
            segments=[PlaneSegment(s.coefficients.copy(), tuple(s.valid_range)) for s in self.segments],
            config=self.config.replace(), extent=self.extent, version=self.version,
        )

    def family(self, name: str) -> _Family:
        return {"free": self.free, "inlier": self.inlier, "sky": self.sky}[name]

    def keep(self, name: str, mask, trackers=()) -> None:
        """Drop Gaussians of family ``name`` where ``mask`` is False.

        ``trackers`` are per-Gaussian state holders (optimizer moments,
        statistics) exposing ``keep(name, mask)``; they are kept aligned.
        """
        mask = np.asarray(mask, dtype=bool)
        self.family(name).keep(mask)
        for t in trackers:
            t.keep(name, mask)
        self.touch()

    def append(self, name: str, new: _Family, trackers=()) -> int:
        if len(new) == 0:
            return 0
        self.family(name).extend(new)
        for t in trackers:
            t.extend(name, len(new))
        self.touch()
        return len(new)

    def segment_coefficients(self) -> np.ndarray:
        """Per-inlier plane coefficients (N, 4)."""
        if not self.segments:
            return np.zeros((0, 4))
        table = np.stack([s.coefficients for s in self.segments])
        return table[self.inlier.segment_id]

    def lifted(self, camera_center=None) -> dict:
        """World-frame (position, quaternion, scale) per family.

        Sky Gaussians are centred on ``camera_center`` (the sky frame moves
        with the camera and only shares its axes with the world).
        """
        cfg = self.config
        f = self.free
        q = f.rotation / np.linalg.norm(f.rotation, axis=-1, keepdims=True) if len(f) else f.rotation
        out = {"free": (f.position, q, np.exp(f.log_scale))}
        if len(self.inlier):
            out["inlier"] = lift_plane(self.inlier.xz, self.inlier.log_scale,
                                       self.segment_coefficients(), cfg.plane_thickness)
        else:
            out["inlier"] = (np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)))
        if len(self.sky):
            pos, quat, scale = lift_sphere(self.sky.xz, self.sky.log_scale, cfg.sky_radius, cfg.sky_thickness)
            if camera_center is not None:
                pos = pos + np.asarray(camera_center)[None, :]
            out["sky"] = (pos, quat, scale)
        else:
            out["sky"] = (np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)))
        return out

    def check_invariants(self) -> None:
        if len(self.inlier) and (self.inlier.segment_id.min() < 0
                                 or self.inlier.segment_id.max() >= len(self.segments)):
            raise DomainError("plane Gaussian refers to a missing segment")
        if len(self.sky) and np.any(np.sum(self.sky.xz ** 2, axis=-1) >= self.config.sky_radius ** 2):
            raise DomainError("sky Gaussian outside the sphere disc")
