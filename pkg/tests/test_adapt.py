"""Densify/prune, importance scoring and pruning, and the silhouette depth filter."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hybridsplat.adapt import (
    DensifyStats, ImportanceState, accumulate_importance, densify_and_prune, importance_prune, prune_mask,
    silhouette_filter,
)
from hybridsplat.config import SceneConfig
from hybridsplat.optimize import Adam, loss_and_gradients
from hybridsplat.raster import render
from hybridsplat.scene import HybridScene

from .toys import five_gaussian_scene, free_gaussians, make_frame, random_ordered_scene


# ---------------------------------------------------------------- importance

def pixel_loop_hits(position, log_scale, rotation, frame, near=0.1):
    """Count pixels within each Gaussian's 3-sigma screen ellipse, one pixel at a time."""
    K = frame.intrinsics
    R_wc = frame.rotation
    hits = np.zeros(len(position))
    for j in range(len(position)):
        p = (position[j] - frame.center) @ R_wc
        if p[2] <= near:
            continue
        q = rotation[j] / np.linalg.norm(rotation[j])
        Rg = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        s = np.exp(log_scale[j])
        cov = Rg @ np.diag(s * s) @ Rg.T
        J = np.array([[K.fx / p[2], 0.0, -K.fx * p[0] / p[2] ** 2],
                      [0.0, K.fy / p[2], -K.fy * p[1] / p[2] ** 2]])
        M = J @ R_wc.T
        inv = np.linalg.inv(M @ cov @ M.T + 0.3 * np.eye(2))
        u = K.fx * p[0] / p[2] + K.cx
        v = K.fy * p[1] / p[2] + K.cy
        for py in range(frame.height):
            for px in range(frame.width):
                d = np.array([px - u, py - v])
                if d @ inv @ d <= 9.0:
                    hits[j] += 1
    return hits


def test_importance_matches_pixel_loop():
    sc, f = five_gaussian_scene()
    # a second view so the sum runs over several keyframes
    g = make_frame(pose=f.pose.copy(), index=1)
    g.pose[:3, 3] += [0.3, 0.0, -0.5]
    frames = [f, g]
    st_ = ImportanceState.for_scene(sc)
    st_.grad[:] = [0.7, 1.9]
    accumulate_importance(st_, sc, frames, 2.5)
    fr = sc.free
    hits = sum(pixel_loop_hits(fr.position, fr.log_scale, fr.rotation, x) for x in frames)
    vol = 4.0 / 3.0 * np.pi * np.prod(np.exp(fr.log_scale), axis=1)
    tau = np.minimum(vol, np.median(vol))
    expect = hits / (1 + np.exp(-fr.opacity)) * tau * np.array([0.7, 1.9]) / 2.5
    assert np.all(hits > 0)
    np.testing.assert_allclose(st_.score, expect, rtol=1e-6)
    assert not st_.grad.any() and st_.samples == 1


def test_importance_invisible_is_zero():
    sc = HybridScene()
    sc.free = free_gaussians([[0.0, 0.0, 5.0], [0.0, 0.0, -5.0]], 0.2)
    s = ImportanceState.for_scene(sc)
    s.grad[:] = 1.0
    accumulate_importance(s, sc, [make_frame()], 1.0)
    assert s.score[0] > 0 and s.score[1] == 0


def test_importance_linear_in_gradient():
    sc = HybridScene()
    sc.free = free_gaussians([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]], 0.2)
    s = ImportanceState.for_scene(sc)
    s.grad[:] = [1.0, 2.0]
    accumulate_importance(s, sc, [make_frame()], 1.0)
    assert s.score[1] == pytest.approx(2 * s.score[0])


def scene_with_free(n, seed=0):
    rng = np.random.default_rng(seed)
    sc = HybridScene()
    sc.free = free_gaussians(rng.uniform(-1, 1, (n, 3)) + [0, 0, 5], 0.1, opacity=rng.normal(size=n))
    return sc, rng


@pytest.mark.parametrize("eta, removed", [(0.0, 0), (5.0, 5), (3.0, 3), (2.5, 2)])
def test_importance_prune_count(eta, removed):
    sc, rng = scene_with_free(100)
    s = ImportanceState.for_scene(sc)
    s.score[:] = rng.random(100)
    s.samples = 1
    low = set(np.argsort(s.score)[:removed].tolist())
    ids = sc.free.opacity.copy()
    assert importance_prune(sc, s, eta) == removed
    assert len(sc.free) == 100 - removed
    # the survivors are exactly the complement of the lowest scores
    gone = {i for i, o in enumerate(ids) if o not in set(sc.free.opacity.tolist())}
    assert gone == low
    assert s.samples == 0 and len(s.score) == len(sc.free)


def test_importance_prune_ties_by_opacity():
    sc, _ = scene_with_free(10)
    sc.free.opacity[:] = np.arange(10, 0, -1, dtype=float)
    s = ImportanceState.for_scene(sc)
    s.samples = 1
    importance_prune(sc, s, 20.0)
    # all scores tie, so the two lowest opacities (indices 8, 9) go
    np.testing.assert_allclose(sc.free.opacity, np.arange(10, 2, -1))


def test_importance_prune_needs_sample():
    sc, _ = scene_with_free(50)
    assert importance_prune(sc, ImportanceState.for_scene(sc), 5.0) == 0
    assert len(sc.free) == 50


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 50.0))
def test_importance_prune_spares_sky_and_road(seed, eta):
    rng = np.random.default_rng(seed)
    sc, _ = random_ordered_scene(rng, n_free=int(rng.integers(0, 40)))
    n_free, n_inl, n_sky = len(sc.free), len(sc.inlier), len(sc.sky)
    s = ImportanceState.for_scene(sc)
    s.score[:] = rng.random(n_free)
    s.samples = 1
    k = importance_prune(sc, s, eta)
    assert k == int(np.floor(eta * n_free / 100.0))
    assert len(sc.free) == n_free - k
    assert len(sc.inlier) == n_inl and len(sc.sky) == n_sky


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 10.0))
def test_importance_ranking_scale_invariant(seed, c):
    # the ranking, hence what is pruned, does not depend on the loss magnitude
    rng = np.random.default_rng(seed)
    sc, f = random_ordered_scene(rng, n_free=12)
    a = ImportanceState.for_scene(sc)
    b = ImportanceState.for_scene(sc)
    g = rng.random(12)
    a.grad[:] = g
    b.grad[:] = g
    accumulate_importance(a, sc, [f], 1.0)
    accumulate_importance(b, sc, [f], c)
    np.testing.assert_allclose(b.score * c, a.score, rtol=1e-12, atol=1e-300)


# ---------------------------------------------------------------- densify / prune

def test_opacity_minus_ten_pruned():
    sc = HybridScene(extent=10.0)
    sc.free = free_gaussians([[0, 0, 5.0], [0, 0, 6.0]], 0.1, opacity=[-10.0, 0.0])
    res = densify_and_prune(sc, DensifyStats.for_scene(sc), np.random.default_rng(0))
    assert res.pruned == 1 and len(sc.free) == 1
    assert sc.free.opacity[0] == 0.0


def test_zero_gradients_no_clone_or_split():
    sc, f = five_gaussian_scene()
    sc.extent = 10.0
    stats = DensifyStats.for_scene(sc)
    stats.count[:] = 5
    res = densify_and_prune(sc, stats, np.random.default_rng(0))
    assert res.cloned == 0 and res.split == 0


def test_clone_and_split_by_size():
    sc = HybridScene(config=SceneConfig(scale_threshold=5.0), extent=10.0)
    # split size is 0.05 * 10 = 0.5 m
    sc.free = free_gaussians([[0, 0, 5.0], [1, 0, 5.0], [2, 0, 5.0]], [[0.1] * 3, [0.8] * 3, [0.1] * 3])
    stats = DensifyStats.for_scene(sc)
    stats.grad_sum[:] = [1.0, 1.0, 0.0]
    stats.count[:] = 1
    res = densify_and_prune(sc, stats, np.random.default_rng(0))
    assert (res.cloned, res.split, res.pruned) == (1, 1, 0)
    assert len(sc.free) == 3 - 1 + 1 + 2
    np.testing.assert_allclose(np.exp(sc.free.log_scale[-2:]), 0.8 / 1.6)
    assert not stats.grad_sum.any() and len(stats.count) == len(sc.free)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_removed_gaussians_satisfy_predicates(seed):
    rng = np.random.default_rng(seed)
    sc, _ = random_ordered_scene(rng, n_free=20)
    sc.extent = 10.0
    sc.free.opacity = rng.normal(-3, 3, 20)
    sc.free.log_scale = np.log(rng.uniform(0.05, 2.0, (20, 3)))
    before = sc.copy()
    bad = {name: prune_mask(before, name) for name in ("free", "inlier", "sky")}
    res = densify_and_prune(sc, DensifyStats.for_scene(sc), rng)
    assert res.pruned == sum(int(b.sum()) for b in bad.values())
    for name in ("free", "inlier", "sky"):
        np.testing.assert_array_equal(sc.family(name).opacity, before.family(name).opacity[~bad[name]])


def checkerboard(H=32, W=32, cell=8):
    v, u = np.mgrid[0:H, 0:W]
    on = ((u // cell + v // cell) % 2).astype(float)
    return np.stack([on, 0.2 + 0.6 * on, 1 - on], -1)


def test_checkerboard_densify_round_improves_fit():
    cfg = SceneConfig(lambda_iso=0.0, lambda_lidar=0.0, lambda_smooth=0.0, lambda_dssim=0.0,
                      grad_threshold=1e-5, scale_threshold=10.0)
    f = make_frame(rgb=checkerboard())
    sc = HybridScene(config=cfg, extent=4.0)
    g = np.linspace(-0.6, 0.6, 3)
    xy = np.array([[x, y] for y in g for x in g])
    sc.free = free_gaussians(np.column_stack([xy, np.full(9, 4.0)]), 0.25)
    adam = Adam(cfg, extent=sc.extent)
    stats = DensifyStats.for_scene(sc)
    for _ in range(30):
        _, buf, _ = loss_and_gradients(sc, f)
        stats.record(buf)
        adam.step(sc, buf)
    n0 = len(sc.free)
    l1_0 = np.abs(render(sc, f).color - f.rgb).mean()
    densify_and_prune(sc, stats, np.random.default_rng(0), trackers=(adam,))
    for _ in range(50):
        _, buf, _ = loss_and_gradients(sc, f)
        adam.step(sc, buf)
    assert len(sc.free) > n0
    assert np.abs(render(sc, f).color - f.rgb).mean() < l1_0


# ---------------------------------------------------------------- silhouette filter

def test_filter_full_and_empty_silhouette():
    d = np.random.default_rng(0).uniform(1, 10, (6, 7))
    np.testing.assert_array_equal(silhouette_filter(d, np.ones_like(d)), d)
    assert not silhouette_filter(d, np.zeros_like(d)).any()


def test_filter_threshold_inclusive():
    d = np.array([[1.0, 2.0, 3.0]])
    s = np.array([[0.9, 0.8999, 1.0]])
    np.testing.assert_array_equal(silhouette_filter(d, s, 0.9), [[1.0, 0.0, 3.0]])
    # input left untouched
    assert d[0, 1] == 2.0
