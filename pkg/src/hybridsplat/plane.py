"""Road plane segmentation: RANSAC fits and per-keyframe-pair plane segments."""
from __future__ import annotations

import logging

import numpy as np

from .errors import DegenerateCloud, VerticalPlane
from .scene import PlaneSegment, canonical_plane

log = logging.getLogger(__name__)

OPEN_END = 2 ** 31 - 1
MIN_VERTICAL_B = 0.1


def _check_cloud(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < 3:
        raise DegenerateCloud("need at least 3 points")
    if not np.all(np.isfinite(points)):
        raise DegenerateCloud("non-finite coordinates")
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateCloud("points are collinear")
    return points


def fit_plane_lstsq(points: np.ndarray) -> np.ndarray:
    """Total-least-squares plane through ``points`` (smallest singular direction)."""
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid)
    n = vt[-1]
    return canonical_plane(np.append(n, -n @ centroid))


def fit_plane_ransac(points, distance_threshold: float, iterations: int = 200, rng_seed=0,
                     valid_range=(0, OPEN_END)):
    """RANSAC plane fit; returns (PlaneSegment, inlier mask).

    Hypotheses from 3-point samples are scored by inlier count (distance <
    threshold), ties going to the lower inlier RMS distance. The winner is
    refit by least squares on its inliers and the mask recomputed against
    the refit plane.
    """
    pts = _check_cloud(points)
    rng = np.random.default_rng(rng_seed)
    n = len(pts)
    samples = np.array([rng.choice(n, 3, replace=False) for _ in range(iterations)])
    a, b, c = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    if not np.any(ok):
        # every sample collinear although the cloud is not: fall back to all points
        best_plane = fit_plane_lstsq(pts)
    else:
        normals = normals[ok] / norms[ok, None]
        offsets = -np.sum(normals * a[ok], axis=1)
        dist = np.abs(pts @ normals.T + offsets)           # (N, hyps)
        inl = dist < distance_threshold
        counts = inl.sum(axis=0)
        sq = np.where(inl, dist ** 2, 0.0).sum(axis=0)
        rms = np.sqrt(sq / np.maximum(counts, 1))
        best = np.lexsort((rms, -counts))[0]
        mask = inl[:, best]
        if mask.sum() >= 3:
            try:
                best_plane = fit_plane_lstsq(_check_cloud(pts[mask]))
            except DegenerateCloud:
                best_plane = canonical_plane(np.append(normals[best], offsets[best]))
        else:
            best_plane = canonical_plane(np.append(normals[best], offsets[best]))
    if abs(best_plane[1]) < MIN_VERTICAL_B:
        raise VerticalPlane(f"fitted plane has B={best_plane[1]:.3f}")
    seg = PlaneSegment(best_plane, tuple(valid_range))
    mask = seg.distance(pts) < distance_threshold
    return seg, mask


def classify(points, segment: PlaneSegment, distance_threshold: float):
    """Indices of points strictly closer than ``distance_threshold`` to the plane, and the rest."""
    d = segment.distance(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    inl = d < distance_threshold
    return np.nonzero(inl)[0], np.nonzero(~inl)[0]


def segment_for_frame(segments, frame_index: int) -> int:
    """Id of the latest segment whose valid range covers ``frame_index`` (else the last one)."""
    hit = [i for i, s in enumerate(segments) if s.contains(frame_index)]
    return hit[-1] if hit else len(segments) - 1


def update_segments(segments, keyframes, points, point_frames, distance_threshold: float,
                    iterations: int = 200, rng_seed=0, open_tail: bool = False):
    """One plane per adjacent keyframe pair, optionally plus an open tail segment.

    ``points`` are world points tagged with the frame that first observed
    them (``point_frames``). Pair (k_i, k_{i+1}) is fitted from points first
    seen in frames k_i..k_{i+1}; the tail covers k_last onwards. A failed fit
    reuses the latest valid segment. Segment ids are stable as keyframes
    are appended, so existing road Gaussians keep their plane.
    With a single keyframe the result is one global segment.
    """
    keyframes = sorted(keyframes)
    if not keyframes:
        raise ValueError("need at least one keyframe")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    point_frames = np.asarray(point_frames)
    ranges = [(keyframes[i], keyframes[i + 1]) for i in range(len(keyframes) - 1)]
    if open_tail or len(keyframes) == 1:
        ranges.append((keyframes[-1], OPEN_END))
    out = []
    for i, (lo, hi) in enumerate(ranges):
        sel = (point_frames >= lo) & (point_frames <= hi)
        fallback = out[-1] if out else (segments[i] if i < len(segments) else
                                        (segments[-1] if segments else None))
        try:
            seg, _ = fit_plane_ransac(points[sel], distance_threshold, iterations,
                                      rng_seed=None if rng_seed is None else rng_seed + i,
                                      valid_range=(lo, hi))
        except (DegenerateCloud, VerticalPlane) as exc:
            if fallback is None:
                raise
            log.debug("segment %s fit failed (%s); reusing previous plane", (lo, hi), exc)
            seg = PlaneSegment(fallback.coefficients.copy(), (lo, hi))
        out.append(seg)
    return out
