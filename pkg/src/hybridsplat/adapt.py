"""Adaptive maintenance: densify/prune, importance pruning, silhouette depth filter."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .raster import hit_counts
from .raster.projection import sigmoid
from .scene import quat_to_rotmat

log = logging.getLogger(__name__)

SPLIT_SCALE_DIVISOR = 1.6


@dataclass
class DensifyStats:
    """Running sum of 2D positional gradient norms and view counts per free Gaussian."""

    grad_sum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    count: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def for_scene(cls, scene) -> "DensifyStats":
        n = len(scene.free)
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def record(self, grads) -> None:
        vis = grads.visible["free"]
        self.grad_sum[vis] += grads.grad2d["free"][vis]
        self.count[vis] += 1

    def mean(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.count, 1)

    def reset(self) -> None:
        self.grad_sum[:] = 0.0
        self.count[:] = 0

    def keep(self, name: str, mask) -> None:
        if name == "free":
            self.grad_sum = self.grad_sum[mask]
            self.count = self.count[mask]

    def extend(self, name: str, n: int) -> None:
        if name == "free":
            self.grad_sum = np.concatenate([self.grad_sum, np.zeros(n)])
            self.count = np.concatenate([self.count, np.zeros(n, dtype=np.int64)])


@dataclass
class DensifyResult:
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def prune_mask(scene, name: str) -> np.ndarray:
    """Gaussians of ``name`` failing the opacity or (free/inlier only) scale threshold."""
    cfg = scene.config
    fam = scene.family(name)
    bad = sigmoid(fam.opacity) < cfg.alpha_threshold
    if name != "sky" and len(fam):
        bad |= np.exp(fam.log_scale).max(axis=1) > cfg.scale_threshold
    return bad


def densify_and_prune(scene, stats: DensifyStats, rng, trackers=()) -> DensifyResult:
    """Clone small / split large high-gradient free Gaussians, then threshold-prune.

    ``trackers`` must include ``stats`` only if the caller wants it kept
    aligned; it is reset at the end regardless.
    """
    cfg = scene.config
    trackers = tuple(t for t in trackers if t is not stats) + (stats,)
    res = DensifyResult()
    free = scene.free
    if len(free):
        hot = stats.mean() > cfg.grad_threshold
        max_scale = np.exp(free.log_scale).max(axis=1)
        split_size = cfg.split_size_fraction * scene.extent
        clone = hot & (max_scale < split_size)
        split = hot & ~clone
        res.cloned = int(clone.sum())
        res.split = int(split.sum())
        new_parts = []
        if res.cloned:
            new_parts.append(free.subset(np.nonzero(clone)[0]))
        if res.split:
            src = free.subset(np.nonzero(split)[0])
            R = quat_to_rotmat(src.rotation / np.linalg.norm(src.rotation, axis=1, keepdims=True))
            s = np.exp(src.log_scale)
            for _ in range(2):
                offs = rng.standard_normal((len(src), 3)) * s
                child = src.copy()
                child.position = src.position + np.einsum("nij,nj->ni", R, offs)
                child.log_scale = src.log_scale - np.log(SPLIT_SCALE_DIVISOR)
                new_parts.append(child)
            scene.keep("free", ~split, trackers)
        for part in new_parts:
            scene.append("free", part, trackers)
    for name in ("free", "inlier", "sky"):
        bad = prune_mask(scene, name)
        if np.any(bad):
            res.pruned += int(bad.sum())
            scene.keep(name, ~bad, trackers)
    stats.reset()
    return res


# ------------------------------------------------------------------ importance

@dataclass
class ImportanceState:
    """Accumulated importance per free Gaussian plus the gradient since the last sample."""

    score: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tau: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v_max50: float = 0.0
    samples: int = 0

    @classmethod
    def for_scene(cls, scene) -> "ImportanceState":
        n = len(scene.free)
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def record_gradient(self, grads) -> None:
        self.grad += grads.grad2d["free"]

    def reset(self) -> None:
        self.score[:] = 0.0
        self.grad[:] = 0.0
        self.samples = 0

    def keep(self, name: str, mask) -> None:
        if name == "free":
            self.score, self.grad, self.tau = self.score[mask], self.grad[mask], self.tau[mask]

    def extend(self, name: str, n: int) -> None:
        if name == "free":
            z = np.zeros(n)
            self.score = np.concatenate([self.score, z])
            self.grad = np.concatenate([self.grad, z])
            self.tau = np.concatenate([self.tau, z])


def gaussian_volume(log_scale) -> np.ndarray:
    return 4.0 / 3.0 * np.pi * np.exp(np.sum(log_scale, axis=1))


def accumulate_importance(state: ImportanceState, scene, frames, loss_total: float) -> ImportanceState:
    """Add one importance sample over the keyframe ``frames``.

    IS_j += hits_j * sigmoid(alpha_j) * tau_j * grad_j / L, hits_j counting
    pixels within Gaussian j's 3-sigma footprint over all frames and
    tau_j the volume capped at the median volume. The gradient
    accumulator is cleared afterwards.
    """
    n = len(scene.free)
    if n == 0:
        state.samples += 1
        return state
    hits = np.zeros(n)
    for fr in frames:
        hits += hit_counts(scene, fr)["free"]
    vol = gaussian_volume(scene.free.log_scale)
    state.v_max50 = float(np.median(vol))
    state.tau = np.clip(vol, 0.0, state.v_max50)
    L = max(float(loss_total), 1e-12)
    state.score += hits * sigmoid(scene.free.opacity) * state.tau * state.grad / L
    state.grad[:] = 0.0
    state.samples += 1
    return state


def importance_prune(scene, state: ImportanceState, eta: float, trackers=()) -> int:
    """Remove the floor(eta% * N_free) free Gaussians with the lowest importance.

    Ties go to the lower opacity. Sky and road Gaussians are never touched.
    Returns 0 without pruning if no sample has been recorded.
    """
    n = len(scene.free)
    k = int(np.floor(eta * n / 100.0))
    if state.samples == 0:
        log.debug("importance prune skipped: no samples")
        return 0
    if k > 0:
        order = np.lexsort((scene.free.opacity, state.score))
        keep = np.ones(n, dtype=bool)
        keep[order[:k]] = False
        trackers = tuple(t for t in trackers if t is not state) + (state,)
        scene.keep("free", keep, trackers)
    state.reset()
    return k


def silhouette_filter(depth, silhouette, s_filter: float = 0.9) -> np.ndarray:
    """Copy of ``depth`` with pixels of silhouette below ``s_filter`` set to 0 (invalid)."""
    out = np.array(depth, dtype=np.float64, copy=True)
    out[np.asarray(silhouette) < s_filter] = 0.0
    return out

