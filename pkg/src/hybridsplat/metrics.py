"""Image and depth quality metrics."""
from __future__ import annotations

import numpy as np
from skimage.metrics import structural_similarity

PSNR_CAP = 99.0


def psnr(pred, target) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give PSNR_CAP."""
    mse = float(np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


def ssim(pred, target) -> float:
    """Gaussian-windowed SSIM (11x11, sigma 1.5, population statistics), channel mean."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(structural_similarity(pred, target, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False,
                                       channel_axis=2 if pred.ndim == 3 else None))


def depth_errors(pred, target, mask=None):
    """(MAE, RMSE) between depth arrays over ``mask``; (nan, nan) when empty."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask is not None:
        pred, target = pred[mask], target[mask]
    if pred.size == 0:
        return float("nan"), float("nan")
    d = pred - target
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d * d)))


def sparse_depth_errors(depth, frame, silhouette=None, s_filter: float = 0.9):
    """MAE/RMSE of rendered ``depth`` against the frame's sparse samples with valid silhouette."""
    if len(frame.sparse_depth) == 0:
        return float("nan"), float("nan")
    u, v = frame.sparse_uv[:, 0], frame.sparse_uv[:, 1]
    valid = np.ones(len(u), dtype=bool) if silhouette is None else silhouette[v, u] >= s_filter
    return depth_errors(depth[v, u], frame.sparse_depth, valid)


def lidar_region_mask(frame) -> np.ndarray:
    """Non-sky pixels in rows at or below the first LiDAR row (the LiDAR-covered band)."""
    H, W = frame.height, frame.width
    mask = np.zeros((H, W), dtype=bool)
    if len(frame.sparse_uv):
        mask[int(frame.sparse_uv[:, 1].min()):, :] = True
    if frame.sky_mask is not None:
        mask &= ~frame.sky_mask
    if frame.gt_depth is not None:
        mask &= frame.gt_depth > 0
    return mask
