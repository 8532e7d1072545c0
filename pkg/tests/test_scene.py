"""Lifting, covariance and container behaviour of the three Gaussian families."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hybridsplat.errors import DomainError
from hybridsplat.scene import (
    FreeGaussians, HybridScene, PlaneGaussians, PlaneSegment, SphereGaussians, canonical_plane,
    lift_plane, lift_sphere, materialize_covariance, project_to_disc, quat_rotate, quat_to_rotmat,
)

Y = np.array([0.0, 1.0, 0.0])


def scipy_rotate(q, v):
    # scipy wants (x, y, z, w)
    return Rotation.from_quat(np.roll(np.atleast_2d(q), -1, axis=-1)).apply(v)


# ---------------------------------------------------------------- lift_sphere

def test_sphere_zenith_is_identity():
    pos, quat, scale = lift_sphere([[0.0, 0.0]], [[0.0, 0.0]], 100.0, 2.0)
    np.testing.assert_allclose(pos[0], [0, 100, 0])
    np.testing.assert_allclose(quat[0], [1, 0, 0, 0])
    np.testing.assert_allclose(scale[0], [1, 2, 1])


def test_sphere_horizon_limit():
    _, quat, _ = lift_sphere([[99.99, 0.0]], [[0.0, 0.0]], 100.0, 1.0)
    h = np.sqrt(0.5)
    np.testing.assert_allclose(quat[0], [h, 0, 0, -h], atol=1e-2)
    # angle approaches 90 degrees
    assert np.degrees(2 * np.arccos(quat[0, 0])) == pytest.approx(90.0, abs=1.0)


def test_sphere_random_radial_alignment():
    rng = np.random.default_rng(0)
    R = 100.0
    r = R * np.sqrt(rng.uniform(0, 0.98, 200))
    a = rng.uniform(0, 2 * np.pi, 200)
    xz = np.column_stack([r * np.cos(a), r * np.sin(a)])
    pos, quat, _ = lift_sphere(xz, np.zeros((200, 2)), R, 1.0)
    np.testing.assert_allclose(scipy_rotate(quat, np.tile(Y, (200, 1))), pos / R, atol=1e-9)


def test_sphere_outside_disc_raises():
    with pytest.raises(DomainError):
        lift_sphere([[60.0, 80.0]], [[0.0, 0.0]], 100.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 0.999), st.floats(0, 2 * np.pi), st.floats(1.0, 1e4))
def test_sphere_lift_on_sphere(frac, ang, R):
    xz = [[R * frac * np.cos(ang), R * frac * np.sin(ang)]]
    pos, quat, _ = lift_sphere(xz, [[0.0, 0.0]], R, 1.0)
    assert pos[0, 1] >= 0
    # projecting onto the sphere is the identity
    np.testing.assert_allclose(pos[0] / np.linalg.norm(pos[0]) * R, pos[0], atol=1e-9 * R)
    np.testing.assert_allclose(np.linalg.norm(quat[0]), 1.0, atol=1e-12)
    # rotation angle equals arccos(y / R)
    angle = 2 * np.arccos(np.clip(quat[0, 0], -1, 1))
    assert angle == pytest.approx(np.arccos(pos[0, 1] / R), abs=1e-6)


# ---------------------------------------------------------------- lift_plane

def test_plane_flat_ground():
    pos, quat, scale = lift_plane([[3.0, -2.0]], [[0.0, np.log(2.0)]], [0, 1, 0, 0], 0.05)
    np.testing.assert_allclose(pos[0], [3, 0, -2])
    np.testing.assert_allclose(quat[0], [1, 0, 0, 0])
    np.testing.assert_allclose(scale[0], [1, 0.05, 2])


def test_plane_offset():
    rng = np.random.default_rng(1)
    pos, _, _ = lift_plane(rng.normal(size=(10, 2)) * 20, np.zeros((10, 2)), [0, 1, 0, -5], 0.05)
    np.testing.assert_allclose(pos[:, 1], 5.0)


def test_plane_tilted_normal_alignment():
    n = np.array([0.1, 0.99, 0.1])
    n /= np.linalg.norm(n)
    rng = np.random.default_rng(2)
    xz = rng.uniform(-30, 30, (50, 2))
    pos, quat, _ = lift_plane(xz, np.zeros((50, 2)), np.append(n, 0.7), 0.05)
    np.testing.assert_allclose(scipy_rotate(quat, np.tile(Y, (50, 1))), np.tile(n, (50, 1)), atol=1e-9)
    angle = 2 * np.arccos(quat[:, 0])
    np.testing.assert_allclose(angle, np.arccos(n[1]), atol=1e-9)


def test_plane_vertical_raises():
    with pytest.raises(DomainError):
        lift_plane([[0.0, 0.0]], [[0.0, 0.0]], [1, 0, 0, 0], 0.05)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(-10, 10),
       st.floats(-100, 100), st.floats(-100, 100))
def test_plane_lift_residual(ac, d, x, z):
    A, b, C = ac
    B = 0.2 + abs(b)
    pos, _, _ = lift_plane([[x, z]], [[0.0, 0.0]], [A, B, C, d], 0.05)
    resid = abs(A * pos[0, 0] + B * pos[0, 1] + C * pos[0, 2] + d) / np.linalg.norm([A, B, C])
    assert resid < 1e-9 * max(1.0, abs(x) + abs(z) + abs(d))


def test_canonical_plane_points_up():
    c = canonical_plane([0.0, -2.0, 0.0, 4.0])
    np.testing.assert_allclose(c, [0, 1, 0, -2])
    seg = PlaneSegment(np.array([0.0, -3.0, 0.0, 3.0]))
    assert seg.coefficients[1] > 0
    assert seg.distance(np.array([[0.0, 4.0, 0.0]]))[0] == pytest.approx(3.0)


# ---------------------------------------------------------------- covariance

def test_covariance_identity_rotation():
    np.testing.assert_allclose(materialize_covariance(np.array([1.0, 0, 0, 0]), np.array([1.0, 2, 3])),
                               np.diag([1.0, 4, 9]), atol=1e-12)


def test_covariance_axes_swap():
    h = np.sqrt(0.5)
    cov = materialize_covariance(np.array([h, 0, 0, h]), np.array([1.0, 2, 1]))
    np.testing.assert_allclose(cov, np.diag([4.0, 1, 1]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1),
       st.lists(st.floats(1e-3, 10), min_size=3, max_size=3))
def test_covariance_eigenvalues(q, s):
    q = np.asarray(q) / np.linalg.norm(q)
    cov = materialize_covariance(q, np.asarray(s))
    assert np.max(np.abs(cov - cov.T)) <= 1e-12
    ev = np.linalg.eigvalsh(cov)
    np.testing.assert_allclose(np.sort(ev), np.sort(np.square(s)), atol=1e-9 * max(1.0, max(s) ** 2))
    assert ev.min() >= -1e-12


def test_rotmat_matches_scipy():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(20, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    ref = Rotation.from_quat(np.roll(q, -1, axis=1)).as_matrix()
    np.testing.assert_allclose(quat_to_rotmat(q), ref, atol=1e-12)
    v = rng.normal(size=(20, 3))
    np.testing.assert_allclose(quat_rotate(q, v), np.einsum("nij,nj->ni", ref, v), atol=1e-12)


# ---------------------------------------------------------------- containers

def test_parameter_counts():
    assert FreeGaussians.n_learnables == 14
    assert SphereGaussians.n_learnables == 8
    assert PlaneGaussians.n_learnables == 8
    f = FreeGaussians(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 4)), np.zeros(1))
    assert sum(a.shape[1] if a.ndim > 1 else 1 for a in f.learnable_arrays().values()) == 14
    s = SphereGaussians(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1))
    assert sum(a.shape[1] if a.ndim > 1 else 1 for a in s.learnable_arrays().values()) == 8
    p = PlaneGaussians(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1), np.zeros(1, int))
    assert sum(a.shape[1] if a.ndim > 1 else 1 for a in p.learnable_arrays().values()) == 8


def test_project_to_disc():
    xz = np.array([[0.0, 10.0], [200.0, 0.0], [99.95, 0.0]])
    out = project_to_disc(xz, 100.0)
    np.testing.assert_allclose(out[0], xz[0])
    np.testing.assert_allclose(np.linalg.norm(out[1:], axis=1), 99.9)


def test_missing_segment_detected():
    sc = HybridScene()
    sc.inlier = PlaneGaussians(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1),
                               np.array([0]))
    with pytest.raises(DomainError):
        sc.check_invariants()
    sc.segments = [PlaneSegment(np.array([0.0, 1.0, 0.0, 0.0]))]
    sc.check_invariants()


class Tracker:
    def __init__(self):
        self.calls = []

    def keep(self, name, mask):
        self.calls.append(("keep", name, int(mask.sum())))

    def extend(self, name, n):
        self.calls.append(("extend", name, n))


def test_keep_and_append_notify_trackers():
    sc = HybridScene()
    sc.free = FreeGaussians(np.zeros((4, 3)), np.zeros((4, 3)), np.zeros((4, 3)),
                            np.tile([1.0, 0, 0, 0], (4, 1)), np.zeros(4))
    t = Tracker()
    v0 = sc.version
    sc.keep("free", np.array([True, False, True, True]), trackers=[t])
    sc.append("free", sc.free.subset([0]), trackers=[t])
    assert len(sc.free) == 4
    assert t.calls == [("keep", "free", 3), ("extend", "free", 1)]
    assert sc.version == v0 + 2


def test_copy_is_deep():
    sc = HybridScene()
    sc.free = FreeGaussians(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)),
                            np.array([[1.0, 0, 0, 0]]), np.zeros(1))
    sc.segments = [PlaneSegment(np.array([0.0, 1.0, 0.0, 0.0]))]
    cp = sc.copy()
    cp.free.position[0, 0] = 5.0
    cp.segments[0].coefficients[3] = 1.0
    assert sc.free.position[0, 0] == 0.0
    assert sc.segments[0].coefficients[3] == 0.0


def test_sky_follows_camera():
    sc = HybridScene()
    sc.sky = SphereGaussians(np.array([[10.0, 20.0]]), np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1))
    a = sc.lifted(np.zeros(3))["sky"][0]
    b = sc.lifted(np.array([1.0, 2.0, 3.0]))["sky"][0]
    np.testing.assert_allclose(b - a, [[1, 2, 3]])
