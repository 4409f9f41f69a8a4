import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import bisect
from scipy.spatial.transform import Rotation

from primfusion.geometry import (GeometryError, InvalidDepthError, Intrinsics, OutOfBoundsError, Plane, Pose,
                                 Ray, backproject, camera_rays, intersect_ray_plane, look_at, project)

INTR = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


def random_pose(rng):
    R = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    return Pose(R, rng.uniform(-2, 2, 3))


def test_backproject_principal_point():
    assert np.allclose(backproject((50, 50), 2.0, INTR, Pose.identity()), (0, 0, 2))


def test_backproject_unit_slope_column():
    assert np.allclose(backproject((150, 50), 1.0, Intrinsics(100, 100, 50, 50, 200, 100), Pose.identity()),
                       (1, 0, 1))


def test_backproject_errors():
    with pytest.raises(InvalidDepthError):
        backproject((10, 10), 0.0, INTR, Pose.identity())
    with pytest.raises(OutOfBoundsError):
        backproject((100.5, 10), 1.0, INTR, Pose.identity())


def test_project_principal_and_behind():
    p = project((0, 0, 2), INTR, Pose.identity())
    assert p.in_front and np.allclose(p.uv, (50, 50)) and p.depth == 2
    assert not project((0, 0, -1), INTR, Pose.identity()).in_front


def test_round_trip_random(rng):
    for _ in range(1000):
        pose = random_pose(rng)
        w, h = int(rng.integers(20, 200)), int(rng.integers(20, 200))
        intr = Intrinsics(rng.uniform(50, 300), rng.uniform(50, 300), rng.uniform(0, w), rng.uniform(0, h), w, h)
        u = np.array([rng.uniform(0, w), rng.uniform(0, h)])
        z = rng.uniform(0.1, 10)
        pr = project(backproject(u, z, intr, pose), intr, pose)
        assert np.max(np.abs(pr.uv - u)) < 1e-4
        assert abs(pr.depth - z) < 1e-6


def test_intersect_axis_aligned():
    hit = intersect_ray_plane(Ray((0, 0, 0), (0, 0, 1)), Plane((0, 0, 1), 2.0))
    assert hit is not None
    x, t = hit
    assert np.allclose(x, (0, 0, 2)) and t == pytest.approx(2.0)


def test_intersect_parallel_and_behind():
    assert intersect_ray_plane(Ray((0, 0, 0), (1, 0, 0)), Plane((0, 0, 1), 2.0)) is None
    assert intersect_ray_plane(Ray((0, 0, 3), (0, 0, 1)), Plane((0, 0, 1), 2.0)) is None


def test_intersect_against_bisection_oracle():
    o = np.array([1.0, 2.0, 3.0])
    d = np.ones(3) / math.sqrt(3)
    n = np.array([1.0, 2.0, 2.0]) / 3.0
    hit = intersect_ray_plane(Ray(o, d), Plane(n, 4.0))
    f = lambda t: n @ (o + t * d) - 4.0
    # n.o = 11/3 < 4, so the root lies ahead of the origin
    t_ref = bisect(f, 0.0, 10.0, xtol=1e-15)
    assert hit is not None and abs(hit[1] - t_ref) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0, 5))
def test_intersection_satisfies_plane(o, d, n, off):
    d, n = np.array(d), np.array(n)
    if np.linalg.norm(d) < 1e-3 or np.linalg.norm(n) < 1e-3:
        return
    plane = Plane.canonical(n / np.linalg.norm(n), off)
    hit = intersect_ray_plane(Ray(o, d / np.linalg.norm(d)), plane)
    if hit is not None:
        x, t = hit
        assert t > 0
        assert abs(plane.normal @ x - plane.offset) < 1e-6


def test_pose_composition_stays_orthonormal(rng):
    acc = Pose.identity()
    steps = [random_pose(rng) for _ in range(50)]
    for i in range(10_000):
        acc = acc.compose(steps[i % 50])
        R = acc.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-6
    assert abs(np.linalg.det(R) - 1) < 1e-6


def test_pose_validation_and_inverse(rng):
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    p = random_pose(rng)
    x = rng.normal(size=(5, 3))
    assert np.allclose(p.inverse().to_world(p.to_world(x)), x)


def test_intrinsics_invariants():
    with pytest.raises(GeometryError):
        Intrinsics(-1, 1, 0, 0, 10, 10)
    with pytest.raises(GeometryError):
        Intrinsics(1, 1, 10, 0, 10, 10)


def test_plane_canonical_flips_negative_offset():
    p = Plane.canonical((0, 0, 1), -2.0)
    assert np.allclose(p.normal, (0, 0, -1)) and p.offset == 2.0


def test_look_at_and_camera_rays():
    pose = look_at((0, 0, 0), (0, 0, 5))
    assert np.allclose(pose.rotation[:, 2], (0, 0, 1))
    o, d, zfac = camera_rays(INTR, pose)
    assert np.allclose(np.linalg.norm(d, axis=1), 1)
    # ray distance * zfac recovers z-depth along the optical axis
    assert np.allclose((d @ pose.rotation)[:, 2], zfac)
