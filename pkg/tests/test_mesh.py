"""TSDF fusion and marching-cubes extraction on analytic surfaces."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridsplat.errors import EmptyVolume, FormatError
from hybridsplat.mesh import TsdfVolume, depth_bounds, extract_mesh, integrate, read_ply, write_ply

from .toys import look_at, pinhole, plane_depth, sphere_depth, sphere_views

K = pinhole(40.0, 48, 48)


@pytest.fixture(scope="module")
def sphere_volume():
    vol = TsdfVolume.from_bounds([-1.4] * 3, [1.4] * 3, 0.05)
    for p in sphere_views():
        integrate(vol, sphere_depth(p), p, K)
    return vol


def ground_volume(voxel=0.05):
    poses = [look_at([x, 1.5, 0.0], [x, 0.0, 4.0]) for x in (-0.5, 0.0, 0.5)]
    depths = [plane_depth(p, 8.0) for p in poses]
    lo, hi = depth_bounds(depths, poses, K, margin=0.3)
    vol = TsdfVolume.from_bounds(lo, hi, voxel)
    for d, p in zip(depths, poses):
        integrate(vol, d, p, K)
    return vol


def test_single_view_plane_crossing():
    # fine pixels, so nearest-pixel lookup stays well under a voxel at grazing angles
    k = pinhole(400.0, 240, 240)
    p = look_at([0.0, 1.5, 0.0], [0.0, 0.0, 4.0])
    d = plane_depth(p, 8.0, k, 240, 240)
    lo, hi = depth_bounds([d], [p], k, margin=0.3)
    vol = integrate(TsdfVolume.from_bounds(lo, hi, 0.05), d, p, k)
    verts, _ = extract_mesh(vol)
    assert np.max(np.abs(verts[:, 1])) < 0.05


def test_flat_ground_within_two_voxels():
    verts, faces = extract_mesh(ground_volume())
    assert len(faces) > 100
    assert np.mean(np.abs(verts[:, 1]) < 2 * 0.05) >= 0.99


def test_sphere_mean_radius(sphere_volume):
    verts, _ = extract_mesh(sphere_volume)
    assert abs(np.linalg.norm(verts, axis=1).mean() - 1.0) < 0.05


def test_sphere_is_closed(sphere_volume):
    _, faces = extract_mesh(sphere_volume)
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, count = np.unique(edges, axis=0, return_counts=True)
    # every edge shared by exactly two triangles, genus 0
    assert np.all(count == 2)
    V = len(np.unique(faces))
    assert V - len(uniq) + len(faces) == 2


def test_empty_depth_leaves_volume():
    vol = TsdfVolume.from_bounds([0, 0, 0], [1, 1, 1], 0.1)
    before = vol.copy()
    integrate(vol, np.zeros((48, 48)), np.eye(4), K)
    assert np.array_equal(vol.tsdf, before.tsdf) and np.array_equal(vol.weight, before.weight)


def test_two_identical_views_double_weight():
    p = look_at([0.0, 1.5, 0.0], [0.0, 0.0, 4.0])
    d = plane_depth(p, 8.0)
    a = integrate(TsdfVolume.from_bounds([-2, -0.5, 0], [2, 1, 8], 0.1), d, p, K)
    b = integrate(integrate(a.copy(), d, p, K), np.zeros_like(d), p, K)
    seen = a.weight > 0
    assert seen.any()
    np.testing.assert_array_equal(b.weight[seen], 2 * a.weight[seen])
    np.testing.assert_allclose(b.tsdf, a.tsdf, atol=1e-6)


def test_order_independent():
    views = sphere_views()[:6]
    a = TsdfVolume.from_bounds([-1.4] * 3, [1.4] * 3, 0.1)
    b = a.copy()
    for p in views:
        integrate(a, sphere_depth(p), p, K)
    for p in reversed(views):
        integrate(b, sphere_depth(p), p, K)
    assert np.max(np.abs(a.tsdf - b.tsdf)) < 1e-4
    np.testing.assert_array_equal(a.weight, b.weight)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_tsdf_bounded(seed):
    rng = np.random.default_rng(seed)
    vol = TsdfVolume.from_bounds([-1, -1, 0.5], [1, 1, 4], 0.1)
    for _ in range(3):
        d = rng.uniform(0.5, 5.0, (48, 48)) * (rng.random((48, 48)) > 0.2)
        integrate(vol, d, look_at(rng.normal(0, 0.2, 3), [0, 0, 3.0]), K)
    assert np.all(np.abs(vol.tsdf) <= 1.0)
    assert np.all(vol.weight >= 0)
    # unobserved voxels keep their initial value
    assert np.all(vol.tsdf[vol.weight == 0] == 1.0)


def test_unobserved_volume_raises():
    with pytest.raises(EmptyVolume):
        extract_mesh(TsdfVolume.from_bounds([0, 0, 0], [1, 1, 1], 0.1))
    with pytest.raises(EmptyVolume):
        depth_bounds([np.zeros((4, 4))], [np.eye(4)], K)


def test_ply_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(20, 3)).astype(np.float32).astype(np.float64)
    f = rng.integers(0, 20, (30, 3))
    write_ply(tmp_path / "m.ply", v, f)
    v2, f2 = read_ply(tmp_path / "m.ply")
    assert np.array_equal(v, v2) and np.array_equal(f, f2)
    (tmp_path / "bad.ply").write_bytes(b"not a mesh")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "bad.ply")
