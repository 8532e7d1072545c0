"""EWA projection of lifted Gaussians into a pinhole camera, and its adjoint."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import materialize_covariance, quat_to_rotmat

FAMILY_FREE, FAMILY_INLIER, FAMILY_SKY = 0, 1, 2
FAMILY_NAMES = ("free", "inlier", "sky")
DILATION = 0.3
SIGMA_EXTENT = 3.0
GUARD_BAND = 1.3  # Jacobian x/z, y/z clamped to this multiple of the half field of view


def _view_limits(frame):
    K = frame.intrinsics
    return GUARD_BAND * 0.5 * frame.width / K.fx, GUARD_BAND * 0.5 * frame.height / K.fy


@dataclass
class Splats:
    """Projected primitives (struct of arrays, family-blocked: free, inlier, sky)."""

    mean2d: np.ndarray      # (P, 2) px
    cov2d: np.ndarray       # (P, 2, 2) px^2, dilated
    conic: np.ndarray       # (P, 3) inverse covariance (a, b, c)
    depth: np.ndarray       # (P,) camera-frame z of the centre
    color: np.ndarray       # (P, 3)
    opacity: np.ndarray     # (P,) sigmoid-activated
    family: np.ndarray      # (P,) int8
    source: np.ndarray      # (P,) index inside the family
    radius: np.ndarray      # (P,) 3-sigma screen radius, 0 when culled
    visible: np.ndarray     # (P,) passed the near-plane test
    # saved for the adjoint
    p_cam: np.ndarray
    cov3d: np.ndarray
    quat: np.ndarray
    scale: np.ndarray
    M: np.ndarray           # J @ W, (P, 2, 3)

    def __len__(self):
        return len(self.depth)

    def family_slice(self, fam: int) -> slice:
        idx = np.nonzero(self.family == fam)[0]
        if len(idx) == 0:
            start = int(np.searchsorted(self.family, fam))
            return slice(start, start)
        return slice(int(idx[0]), int(idx[-1]) + 1)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def project(scene, frame, near: float | None = None) -> Splats:
    """Lift every family, move it into the camera and project with the pinhole Jacobian.

    Sky Gaussians live in a camera-centred frame sharing the world axes, so
    they are only rotated into the camera (translation cancels exactly).
    """
    near = scene.config.near_plane if near is None else near
    lifted = scene.lifted()
    R_wc = frame.rotation
    c = frame.center
    pos, quat, scale, col, opa, fam, src, pcam = [], [], [], [], [], [], [], []
    for f_id, name, family in ((FAMILY_FREE, "free", scene.free),
                               (FAMILY_INLIER, "inlier", scene.inlier),
                               (FAMILY_SKY, "sky", scene.sky)):
        p, q, s = lifted[name]
        n = len(p)
        pos.append(p)
        quat.append(q)
        scale.append(s)
        col.append(family.color)
        opa.append(sigmoid(family.opacity))
        fam.append(np.full(n, f_id, dtype=np.int8))
        src.append(np.arange(n))
        pcam.append(p @ R_wc if f_id == FAMILY_SKY else (p - c) @ R_wc)
    p_cam = np.concatenate(pcam).reshape(-1, 3)
    quat = np.concatenate(quat).reshape(-1, 4)
    scale = np.concatenate(scale).reshape(-1, 3)
    P = len(p_cam)
    K = frame.intrinsics
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    visible = z > near
    zs = np.where(visible, z, 1.0)
    mean2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=-1)
    # far off-screen primitives close to the camera would otherwise get
    # enormous footprints from the linearisation
    limx, limy = _view_limits(frame)
    xc = np.clip(x / zs, -limx, limx) * zs
    yc = np.clip(y / zs, -limy, limy) * zs
    J = np.zeros((P, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * xc / zs ** 2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * yc / zs ** 2
    W = R_wc.T
    M = J @ W
    cov3d = materialize_covariance(quat, scale) if P else np.zeros((0, 3, 3))
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2) + DILATION * np.eye(2)
    a, b, cc = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * cc - b * b
    conic = np.stack([cc / det, -b / det, a / det], axis=-1)
    mid = 0.5 * (a + cc)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.where(visible, SIGMA_EXTENT * np.sqrt(lam), 0.0)
    return Splats(
        mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z.copy(),
        color=np.concatenate(col).reshape(-1, 3), opacity=np.concatenate(opa),
        family=np.concatenate(fam), source=np.concatenate(src), radius=radius, visible=visible,
        p_cam=p_cam, cov3d=cov3d, quat=quat, scale=scale, M=M,
    )


def tile_rects(splats: Splats, H: int, W: int, tile: int) -> np.ndarray:
    """Inclusive tile rectangles covered by each 3-sigma footprint; empty rows have tx0 > tx1."""
    ntx = (W + tile - 1) // tile
    nty = (H + tile - 1) // tile
    m, r = splats.mean2d, splats.radius
    with np.errstate(invalid="ignore"):
        x0 = np.floor((m[:, 0] - r) / tile)
        x1 = np.floor((m[:, 0] + r) / tile)
        y0 = np.floor((m[:, 1] - r) / tile)
        y1 = np.floor((m[:, 1] + r) / tile)
    ok = (splats.visible & (r > 0) & (m[:, 0] + r >= 0) & (m[:, 0] - r <= W - 1)
          & (m[:, 1] + r >= 0) & (m[:, 1] - r <= H - 1))
    rect = np.stack([np.clip(x0, 0, ntx - 1), np.clip(x1, 0, ntx - 1),
                     np.clip(y0, 0, nty - 1), np.clip(y1, 0, nty - 1)], axis=-1)
    rect = np.where(ok[:, None], rect, np.array([1, 0, 1, 0]))
    return rect.astype(np.int64)


def project_backward(splats: Splats, frame, g_mean2d, g_conic, g_depth):
    """dL/d(world position, unit quaternion, scale) for every primitive.

    Positions of sky primitives are differentiated in their own
    camera-centred frame; both frames share the world-to-camera rotation,
    so the same formula applies.
    """
    K = frame.intrinsics
    R_wc = frame.rotation
    x, y, z = splats.p_cam[:, 0], splats.p_cam[:, 1], splats.p_cam[:, 2]
    vis = splats.visible
    z = np.where(vis, z, 1.0)
    # conic -> cov2d
    a, b, c = splats.conic[:, 0], splats.conic[:, 1], splats.conic[:, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    GQ = np.stack([np.stack([g_conic[:, 0], 0.5 * g_conic[:, 1]], -1),
                   np.stack([0.5 * g_conic[:, 1], g_conic[:, 2]], -1)], -2)
    G2 = -Q @ GQ @ Q
    M = splats.M
    G3 = np.swapaxes(M, 1, 2) @ G2 @ M
    GM = 2.0 * G2 @ M @ splats.cov3d
    GJ = GM @ R_wc  # dL/dJ = dL/dM @ W^T, W = R_wc^T
    # clamped coordinates: J depends on z alone, as -f * lim * sign / z
    limx, limy = _view_limits(frame)
    inx = np.abs(x / z) <= limx
    iny = np.abs(y / z) <= limy
    xc = np.clip(x / z, -limx, limx) * z
    yc = np.clip(y / z, -limy, limy) * z
    gx = GJ[:, 0, 2] * (-K.fx / z ** 2) * inx + g_mean2d[:, 0] * K.fx / z
    gy = GJ[:, 1, 2] * (-K.fy / z ** 2) * iny + g_mean2d[:, 1] * K.fy / z
    gz = (GJ[:, 0, 0] * (-K.fx / z ** 2) + GJ[:, 0, 2] * (np.where(inx, 2.0, 1.0) * K.fx * xc / z ** 3)
          + GJ[:, 1, 1] * (-K.fy / z ** 2) + GJ[:, 1, 2] * (np.where(iny, 2.0, 1.0) * K.fy * yc / z ** 3)
          - g_mean2d[:, 0] * K.fx * x / z ** 2 - g_mean2d[:, 1] * K.fy * y / z ** 2
          + g_depth)
    g_cam = np.stack([gx, gy, gz], axis=-1)
    g_cam[~vis] = 0.0
    G3[~vis] = 0.0
    g_pos = g_cam @ R_wc.T
    Rq = quat_to_rotmat(splats.quat)
    s = splats.scale
    g_R = 2.0 * G3 @ Rq * (s * s)[:, None, :]
    g_scale = 2.0 * s * np.einsum("nik,nij,njk->nk", Rq, G3, Rq)
    return g_pos, g_R, g_scale
