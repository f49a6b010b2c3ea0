import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from sgc.lrf import (DegenerateSupportError, LocalReferenceFrame, Support, SupportError, compute_lrf,
                     extract_support, lrf_at)
from sgc.pointcloud import PointCloud, SpatialIndex
from sgc.synthetic import HeightField, plane_grid, sphere


def _frame_ok(f: LocalReferenceFrame):
    np.testing.assert_allclose(f.axes @ f.axes.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(f.axes) == pytest.approx(1.0, abs=1e-9)


def test_support_grid_disk():
    g = plane_grid(21, 21)
    p = g.points[10 * 21 + 10]
    s = extract_support(g, SpatialIndex(g), p, 2.5)
    offs = g.points[s.point_indices] - p
    # integer lattice points with x^2 + y^2 <= 6.25
    expect = sum(1 for x in range(-3, 4) for y in range(-3, 4) if x * x + y * y <= 6.25)
    assert len(s) == expect == 21
    assert np.all(np.linalg.norm(offs, axis=1) <= 2.5 + 1e-9)


def test_support_containment_and_empty():
    g = plane_grid(5, 5)
    ix = SpatialIndex(g)
    assert len(extract_support(g, ix, [2, 2, 0], 100.0)) == 25
    with pytest.raises(SupportError):
        extract_support(g, ix, [100, 100, 100], 1.0)


def test_plane_axes():
    xy = np.array([(x, y) for x in np.linspace(-6, 6, 49) for y in np.linspace(-2, 2, 17)])
    c = PointCloud(np.column_stack([xy, np.zeros(len(xy))]))
    f = lrf_at(c, SpatialIndex(c), [0.1, 0.05, 0.0], 10.0)
    assert np.arccos(min(1.0, abs(f.axes[2, 2]))) < 1e-3
    assert np.arccos(min(1.0, abs(f.axes[0, 0]))) < 1e-3
    _frame_ok(f)


def test_normal_fixes_third_axis():
    s = sphere(3000, 10.0)
    ix = SpatialIndex(s)
    for i in (0, 500, 1700):
        p = s.points[i]
        n = p / np.linalg.norm(p)
        f = lrf_at(s, ix, p, 4.0, normal=n)
        assert f.axes[2] @ n > 0
        _frame_ok(f)
        g = lrf_at(s, ix, p, 4.0, normal=-n)
        assert g.axes[2] @ n < 0
        _frame_ok(g)


def test_too_small_support():
    sup = Support(np.zeros(3), 1.0, np.arange(3), np.eye(3))
    with pytest.raises(DegenerateSupportError):
        compute_lrf(sup)


def test_collinear_support_degenerate():
    pts = np.column_stack([np.linspace(-1, 1, 10), np.zeros(10), np.zeros(10)])
    with pytest.raises(DegenerateSupportError):
        compute_lrf(Support(np.zeros(3), 2.0, np.arange(10), pts))


def test_isotropic_support_flagged_ambiguous():
    # the 4 corners of a square: two equal eigenvalues
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0.0]])
    f = compute_lrf(Support(np.zeros(3), 2.0, np.arange(4), pts))
    assert f.ambiguous
    _frame_ok(f)


def _bumpy_support(seed):
    rng = np.random.default_rng(seed)
    field = HeightField.random(seed, extent=(0, 30, 0, 30))
    c = field.sample((0, 30, 0, 30), 1.0, seed=seed)
    i = rng.integers(len(c))
    idx = SpatialIndex(c)
    return c, idx, c.points[i]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rotation_covariance(seed):
    c, idx, p = _bumpy_support(seed)
    f = lrf_at(c, idx, p, 8.0)
    rng = np.random.default_rng(seed + 1)
    Q = Rotation.random(random_state=rng).as_matrix()
    t = rng.normal(size=3) * 50
    moved = c.transformed(Q, t)
    g = lrf_at(moved, SpatialIndex(moved), Q @ p + t, 8.0)
    _frame_ok(f)
    _frame_ok(g)
    if not (f.ambiguous or g.ambiguous):
        np.testing.assert_allclose(g.axes, f.axes @ Q.T, atol=1e-6)
        np.testing.assert_allclose(g.origin, Q @ p + t, atol=1e-9)


def test_noise_repeatability():
    """Small noise on the support leaves every axis within 10 degrees in most trials."""
    ok = 0
    trials = 200
    for k in range(trials):
        c, idx, p = _bumpy_support(k % 20)
        rng = np.random.default_rng(1000 + k)
        p = c.points[rng.integers(len(c))]
        f = lrf_at(c, idx, p, 8.0)
        noisy = PointCloud(c.points + rng.normal(0, 0.1, c.points.shape))
        g = lrf_at(noisy, SpatialIndex(noisy), p, 8.0)
        ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", f.axes, g.axes), -1, 1)))
        ok += bool(np.all(ang < 10))
    assert ok / trials >= 0.9


def test_local_global_round_trip(rng):
    axes = Rotation.random(random_state=rng).as_matrix()
    f = LocalReferenceFrame(rng.normal(size=3), axes)
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(f.to_global(f.to_local(pts)), pts, atol=1e-12)
