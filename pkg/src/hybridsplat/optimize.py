"""Losses with analytic image-space gradients, per-group Adam, keyframe list."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import DimensionMismatch
from .raster import backward, render

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _blur(img, win):
    # zero padding; with a symmetric window this operator is self-adjoint
    out = correlate1d(img, win, axis=0, mode="constant")
    return correlate1d(out, win, axis=1, mode="constant")


def ssim(a: np.ndarray, b: np.ndarray, return_grad: bool = False):
    """Mean SSIM over pixels and channels, 11x11 Gaussian window (sigma 1.5), zero padded.

    With ``return_grad`` also returns dSSIM/da.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    flat = a.ndim == 2
    if flat:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    total = 0.0
    grad = np.zeros_like(a)
    n = a.size
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _blur(x, win), _blur(y, win)
        sxx = _blur(x * x, win) - mx * mx
        syy = _blur(y * y, win) - my * my
        sxy = _blur(x * y, win) - mx * my
        A1 = 2 * mx * my + SSIM_C1
        A2 = 2 * sxy + SSIM_C2
        B1 = mx * mx + my * my + SSIM_C1
        B2 = sxx + syy + SSIM_C2
        smap = (A1 * A2) / (B1 * B2)
        total += smap.sum()
        if return_grad:
            d_mx = (2 * my * A2) / (B1 * B2) - smap * (2 * mx) / B1
            d_sxy = 2 * A1 / (B1 * B2)
            d_sxx = -smap / B2
            # sxx = E[x^2] - mx^2, sxy = E[xy] - mx my
            d_mx_total = d_mx - 2 * mx * d_sxx - my * d_sxy
            grad[..., ch] = (_blur(d_mx_total, win) + 2 * x * _blur(d_sxx, win)
                             + y * _blur(d_sxy, win)) / n
    value = total / n
    if return_grad:
        return value, (grad[..., 0] if flat else grad)
    return value


def loss_rgb(pred, target, lam: float = 0.2, return_grad: bool = False):
    """(1 - lam) * L1 + lam * (1 - SSIM) / 2."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"{pred.shape} vs {target.shape}")
    diff = pred - target
    l1 = np.abs(diff).mean()
    if lam > 0:
        s, gs = ssim(pred, target, return_grad=True) if return_grad else (ssim(pred, target), None)
    else:
        s, gs = 1.0, np.zeros_like(pred)
    value = (1 - lam) * l1 + lam * (1 - s) / 2
    if not return_grad:
        return value
    grad = (1 - lam) * np.sign(diff) / diff.size - lam * 0.5 * gs
    return value, grad


def loss_lidar(depth, uv, sparse_depth, silhouette=None, s_filter: float = 0.9, return_grad: bool = False):
    """Mean |D(u, v) - d| over samples whose silhouette is at least ``s_filter``; 0 if none."""
    depth = np.asarray(depth, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.int64).reshape(-1, 2)
    sparse_depth = np.asarray(sparse_depth, dtype=np.float64)
    valid = np.ones(len(uv), dtype=bool)
    if silhouette is not None:
        valid = silhouette[uv[:, 1], uv[:, 0]] >= s_filter
    grad = np.zeros_like(depth)
    if not np.any(valid):
        return (0.0, grad) if return_grad else 0.0
    u, v = uv[valid, 0], uv[valid, 1]
    diff = depth[v, u] - sparse_depth[valid]
    value = float(np.abs(diff).mean())
    if not return_grad:
        return value
    np.add.at(grad, (v, u), np.sign(diff) / len(diff))
    return value, grad


def loss_smooth(depth, image, valid=None, return_grad: bool = False):
    """Edge-aware depth smoothness with forward differences.

    mean(|dD/dx| exp(-|dI/dx|)) + mean(|dD/dy| exp(-|dI/dy|)), image gradients
    averaged over channels. ``valid`` (H x W bool) drops pairs touching
    invalid pixels.
    """
    D = np.asarray(depth, dtype=np.float64)
    I = np.asarray(image, dtype=np.float64)
    if I.ndim == 2:
        I = I[..., None]
    wx = np.exp(-np.abs(np.diff(I, axis=1)).mean(axis=2))
    wy = np.exp(-np.abs(np.diff(I, axis=0)).mean(axis=2))
    dx = np.diff(D, axis=1)
    dy = np.diff(D, axis=0)
    if valid is not None:
        wx = wx * (valid[:, 1:] & valid[:, :-1])
        wy = wy * (valid[1:, :] & valid[:-1, :])
    value = float((np.abs(dx) * wx).mean() + (np.abs(dy) * wy).mean())
    if not return_grad:
        return value
    gx = np.sign(dx) * wx / dx.size
    gy = np.sign(dy) * wy / dy.size
    grad = np.zeros_like(D)
    grad[:, 1:] += gx
    grad[:, :-1] -= gx
    grad[1:, :] += gy
    grad[:-1, :] -= gy
    return value, grad


def loss_iso(log_scale, return_grad: bool = False):
    """Mean over Gaussians of sum_k (s_k - mean(s))^2 on activated scales."""
    log_scale = np.asarray(log_scale, dtype=np.float64).reshape(-1, 3)
    if len(log_scale) == 0:
        return (0.0, np.zeros_like(log_scale)) if return_grad else 0.0
    s = np.exp(log_scale)
    dev = s - s.mean(axis=1, keepdims=True)
    value = float(np.sum(dev * dev, axis=1).mean())
    if not return_grad:
        return value
    # the mean term drops out because deviations sum to zero
    return value, 2.0 * dev / len(s) * s


def loss_reg(depth, image, log_scale, valid=None):
    return loss_smooth(depth, image, valid), loss_iso(log_scale)


@dataclass
class LossReport:
    l_rgb: float
    l_lidar: float
    l_smooth: float
    l_iso: float
    total: float
    depth_l1: np.ndarray


def compute_loss(output, frame, scene):
    """Total loss for one render plus dL/dC, dL/dD and dL/d(free log-scale)."""
    cfg = scene.config
    l_rgb, g_rgb = loss_rgb(output.color, frame.rgb, cfg.lambda_dssim, return_grad=True)
    l_lid, g_lid = loss_lidar(output.depth, frame.sparse_uv, frame.sparse_depth, output.silhouette,
                              cfg.silhouette_filter_threshold, return_grad=True)
    valid = None if frame.sky_mask is None else ~frame.sky_mask
    l_sm, g_sm = loss_smooth(output.depth, frame.rgb, valid, return_grad=True)
    l_iso, g_iso = loss_iso(scene.free.log_scale, return_grad=True)
    total = (cfg.lambda_rgb * l_rgb + cfg.lambda_lidar * l_lid
             + cfg.lambda_reg * (cfg.lambda_smooth * l_sm + cfg.lambda_iso * l_iso))
    depth_l1 = np.full(output.depth.shape, np.nan)
    if len(frame.sparse_depth):
        u, v = frame.sparse_uv[:, 0], frame.sparse_uv[:, 1]
        depth_l1[v, u] = np.abs(output.depth[v, u] - frame.sparse_depth)
    report = LossReport(l_rgb, l_lid, l_sm, l_iso, total, depth_l1)
    d_color = cfg.lambda_rgb * g_rgb
    d_depth = cfg.lambda_lidar * g_lid + cfg.lambda_reg * cfg.lambda_smooth * g_sm
    d_log_scale = cfg.lambda_reg * cfg.lambda_iso * g_iso
    return report, d_color, d_depth, d_log_scale


def loss_and_gradients(scene, frame, sort_mode: str = "grouped"):
    """Render, evaluate the loss and backpropagate into a GradientBuffer."""
    out = render(scene, frame, sort_mode)
    report, d_color, d_depth, d_ls = compute_loss(out, frame, scene)
    buf = backward(scene, frame, out, d_color, d_depth)
    buf.free.log_scale += d_ls
    return report, buf, out


# ------------------------------------------------------------------ optimizer

@dataclass
class Adam:
    """Adam with one learning rate per parameter group; moments track the scene layout."""

    config: object
    extent: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    steps: int = 0
    skipped: int = 0
    state: dict = field(default_factory=dict)

    GROUPS = {
        ("free", "position"): "position", ("inlier", "xz"): "position", ("sky", "xz"): "sky_position",
        ("free", "color"): "color", ("inlier", "color"): "color", ("sky", "color"): "color",
        ("free", "opacity"): "opacity", ("inlier", "opacity"): "opacity", ("sky", "opacity"): "opacity",
        ("free", "log_scale"): "scale", ("inlier", "log_scale"): "scale", ("sky", "log_scale"): "scale",
        ("free", "rotation"): "rotation",
    }

    def lr(self, group: str) -> float:
        c = self.config
        return {
            "position": c.lr_position * self.extent,
            "sky_position": c.lr_position * c.sky_radius,
            "color": c.lr_color, "opacity": c.lr_opacity,
            "scale": c.lr_scale, "rotation": c.lr_rotation,
        }[group]

    def _moments(self, fam: str, key: str, like: np.ndarray):
        st = self.state.get((fam, key))
        if st is None or st[0].shape != like.shape:
            st = (np.zeros_like(like, dtype=np.float64), np.zeros_like(like, dtype=np.float64))
            self.state[(fam, key)] = st
        return st

    def keep(self, fam: str, mask) -> None:
        for (f, k), (m, v) in list(self.state.items()):
            if f == fam:
                self.state[(f, k)] = (m[mask], v[mask])

    def extend(self, fam: str, n: int) -> None:
        for (f, k), (m, v) in list(self.state.items()):
            if f == fam:
                self.state[(f, k)] = (np.concatenate([m, np.zeros((n,) + m.shape[1:])]),
                                      np.concatenate([v, np.zeros((n,) + v.shape[1:])]))

    def step(self, scene, grads) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite gradients."""
        if not grads.all_finite():
            self.skipped += 1
            return False
        self.steps += 1
        t = self.steps
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for fam_name in ("free", "inlier", "sky"):
            fam = scene.family(fam_name)
            gfam = grads.families()[fam_name]
            if len(fam) == 0:
                continue
            for key in fam.learnable_arrays():
                g = getattr(gfam, key)
                param = getattr(fam, key)
                if g.shape != param.shape:
                    raise DimensionMismatch(f"gradient for {fam_name}.{key} has shape {g.shape}")
                m, v = self._moments(fam_name, key, param)
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                lr = self.lr(self.GROUPS[(fam_name, key)])
                param -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            np.clip(fam.color, 0.0, 1.0, out=fam.color)
        if len(scene.free):
            scene.free.rotation /= np.linalg.norm(scene.free.rotation, axis=1, keepdims=True)
        if len(scene.sky):
            from .scene import project_to_disc
            scene.sky.xz = project_to_disc(scene.sky.xz, scene.config.sky_radius)
        scene.touch()
        return True


# ------------------------------------------------------------------ keyframes

@dataclass
class KeyframeList:
    """Working set: K - 2 sampled overlapping frames plus the previous and current frame."""

    capacity: int
    sampled: list = field(default_factory=list)
    previous: int | None = None
    current: int | None = None
    last_update_frame: int = -1

    @property
    def entries(self) -> list:
        out = list(self.sampled)
        for f in (self.previous, self.current):
            if f is not None and f not in out:
                out.append(f)
        return out

    def __len__(self):
        return len(self.entries)

    def advance(self, frame_index: int) -> None:
        """Slide the previous/current slots to a newly arrived frame."""
        if self.current is not None and self.current != frame_index:
            self.previous = self.current
        self.current = frame_index
        self.sampled = [f for f in self.sampled if f not in (self.previous, self.current)]

    def is_full(self) -> bool:
        return len(self) == self.capacity


def frame_overlap(current, other) -> float:
    """Fraction of ``current``'s sparse-depth points that project into ``other`` with positive depth."""
    if len(current.sparse_depth) == 0:
        return 0.0
    pts = current.backproject(current.sparse_uv, current.sparse_depth)
    uv, z = other.project(pts)
    H, W = other.height, other.width
    with np.errstate(invalid="ignore"):
        inside = (z > 0) & (uv[:, 0] >= -0.5) & (uv[:, 0] < W - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < H - 0.5)
    return float(inside.mean())


def update_keyframes(kf: KeyframeList, current, frames, rng) -> KeyframeList:
    """Resample the K - 2 overlapping frames and add the previous and current frame.

    ``frames`` are all frames seen so far (indexable by frame index);
    candidates are those with non-zero overlap with ``current``.
    """
    kf.advance(current.index)
    candidates = [f.index for f in frames
                  if f.index not in (kf.previous, kf.current) and frame_overlap(current, f) > 0]
    k = max(kf.capacity - 2, 0)
    if len(candidates) > k:
        candidates = sorted(rng.choice(candidates, size=k, replace=False).tolist())
    kf.sampled = candidates
    kf.last_update_frame = current.index
    return kf
