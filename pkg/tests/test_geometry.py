import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esvae import geometry as geo
from esvae.errors import (
    AntipodalPointsError,
    DegenerateConfigurationError,
    InjectivityRadiusError,
    InvalidInputError,
)

from conftest import random_preshape


def test_to_preshape_centers_and_normalizes(rng):
    x = geo.to_preshape(rng.standard_normal((7, 3)) + 5.0)
    assert np.allclose(x.sum(axis=0), 0.0, atol=1e-14)
    assert abs(geo.norm(x) - 1.0) < 1e-14
    assert geo.is_preshape(x)


def test_to_preshape_rejects_coincident_landmarks():
    with pytest.raises(DegenerateConfigurationError):
        geo.to_preshape(np.ones((4, 3)))


def test_to_preshape_rejects_nonfinite():
    x = np.zeros((4, 3))
    x[1, 2] = np.nan
    with pytest.raises(InvalidInputError):
        geo.to_preshape(x)


def test_preshape_distance_known_angle(rng):
    # y = cos(theta) x + sin(theta) u with u a unit tangent at x
    x = random_preshape(rng)
    u = geo.random_tangent(x, rng)
    u /= geo.norm(u)
    for theta in (1e-7, 0.3, 1.2, 2.9):
        y = np.cos(theta) * x + np.sin(theta) * u
        assert abs(geo.preshape_distance(x, y) - theta) < 1e-7 + 1e-12
        assert abs(geo.norm(geo.log_map(x, y)) - theta) < 1e-12


def test_exp_log_round_trip_batch(rng):
    # 1000 random cases, k up to 32, m = 3
    for k in (3, 8, 17, 32):
        x = random_preshape(rng, k, 3, 250)
        w = geo.random_tangent(x, rng)
        w *= (rng.uniform(0.0, 3.0, 250) / geo.norm(w))[:, None, None]
        y = geo.exp_map(x, w)
        assert np.all(np.abs(geo.norm(y) - 1) < 1e-12)
        assert np.max(geo.norm(geo.log_map(x, y) - w)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(k=st.integers(3, 12), seed=st.integers(0, 2 ** 32 - 1), r=st.floats(0.0, 3.0))
def test_exp_log_round_trip_property(k, seed, r):
    g = np.random.default_rng(seed)
    x = random_preshape(g, k)
    w = geo.random_tangent(x, g)
    w *= r / max(geo.norm(w), 1e-300)
    assert geo.norm(geo.log_map(x, geo.exp_map(x, w)) - w) < 1e-9


def test_exp_rejects_long_vectors(rng):
    x = random_preshape(rng)
    w = geo.random_tangent(x, rng)
    with pytest.raises(InjectivityRadiusError):
        geo.exp_map(x, np.pi * w / geo.norm(w))


def test_log_rejects_antipodal(rng):
    x = random_preshape(rng)
    with pytest.raises(AntipodalPointsError):
        geo.log_map(x, -x)


def test_log_of_self_is_zero(rng):
    x = random_preshape(rng)
    assert np.all(geo.log_map(x, x) == 0.0)


def test_shape_distance_similarity_invariance(rng):
    x = random_preshape(rng, 10, 3, 200)
    y = random_preshape(rng, 10, 3, 200)
    d0 = geo.shape_distance(x, y)
    rot = geo.random_rotation(3, rng, 200)
    scale = rng.uniform(0.2, 5.0, (200, 1, 1))
    shift = rng.standard_normal((200, 1, 3))
    y2 = geo.to_preshape(scale * (y @ rot) + shift)
    x2 = geo.to_preshape(x @ geo.random_rotation(3, rng, 200))
    assert np.max(np.abs(geo.shape_distance(x2, y2) - d0)) < 1e-8


def test_shape_distance_symmetric(rng):
    x, y = random_preshape(rng, 6, 3, 2)
    assert abs(geo.shape_distance(x, y) - geo.shape_distance(y, x)) < 1e-12


def test_optimal_rotation_recovers_known_rotation(rng):
    x = random_preshape(rng, 9, 3)
    r0 = geo.random_rotation(3, rng)
    rot = geo.optimal_rotation(x, x @ r0.T)
    assert np.allclose(rot, r0, atol=1e-10)
    assert abs(np.linalg.det(rot) - 1) < 1e-12


def test_optimal_rotation_is_proper_when_reflection_is_better(rng):
    x = random_preshape(rng, 6, 3)
    reflect = np.diag([1.0, 1.0, -1.0])
    rot = geo.optimal_rotation(x, x @ reflect)
    assert abs(np.linalg.det(rot) - 1) < 1e-12


def test_procrustes_beats_random_rotation_sweep(rng):
    x, y = random_preshape(rng, 8, 3, 2)
    best = geo.shape_distance(x, y)
    sweep = geo.random_rotation(3, rng, 10_000)
    dists = geo.preshape_distance(x, y @ sweep)
    assert best <= dists.min() + 1e-12


def test_uniqueness_flag(rng):
    x = random_preshape(rng, 6, 3)
    _, unique = geo.optimal_rotation(x, x, return_unique=True)
    assert unique
    # collinear landmarks: rotations about the line leave the shape unchanged
    line = geo.to_preshape(np.outer(np.arange(5.0), [1.0, 0.0, 0.0]))
    _, unique = geo.optimal_rotation(line, line, return_unique=True)
    assert not unique


def test_parallel_transport_isometry_and_tangency(rng):
    src, dst = random_preshape(rng, 7, 3, 2)
    v, w = geo.random_tangent(src, rng), geo.random_tangent(src, rng)
    pv, pw = geo.parallel_transport(src, dst, v), geo.parallel_transport(src, dst, w)
    assert abs(geo.inner(pv, pw) - geo.inner(v, w)) < 1e-8
    assert abs(geo.inner(pv, dst)) < 1e-12
    assert np.allclose(pv.sum(axis=0), 0.0, atol=1e-12)


def test_parallel_transport_of_geodesic_velocity(rng):
    # the velocity of the geodesic is transported to its velocity at the end point
    src, dst = random_preshape(rng, 7, 3, 2)
    u = geo.log_map(src, dst)
    moved = geo.parallel_transport(src, dst, u)
    assert np.allclose(moved, -geo.log_map(dst, src), atol=1e-10)


def test_project_to_tangent(rng):
    base = random_preshape(rng)
    w = geo.project_to_tangent(base, rng.standard_normal(base.shape))
    assert abs(geo.inner(base, w)) < 1e-14
    assert np.allclose(w.sum(axis=0), 0.0, atol=1e-14)
    assert np.allclose(geo.project_to_tangent(base, w), w, atol=1e-15)


def test_slerp_end_points_and_midpoint(rng):
    x, y = random_preshape(rng, 5, 3, 2)
    assert np.allclose(geo.slerp(x, y, 0.0), x)
    assert np.allclose(geo.slerp(x, y, 1.0), y, atol=1e-12)
    mid = geo.slerp(x, y, 0.5)
    assert abs(geo.preshape_distance(x, mid) - geo.preshape_distance(y, mid)) < 1e-10


def test_random_rotation_is_special_orthogonal(rng):
    r = geo.random_rotation(3, rng, 50)
    assert np.allclose(r @ np.swapaxes(r, -1, -2), np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(r), 1.0)
