import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intpinn.geometry import (
    Ball,
    Disk,
    Sampler,
    SamplerKind,
    UnsupportedConfiguration,
    additive_recursion,
    cube_to_sphere,
    enclosed_charge,
    enclosed_current,
    golden_alphas,
    plane_basis,
    sample_disk_boundary,
    sample_surface,
    sample_training_balls,
    sample_training_disks,
    surface_area,
    unit_ball_volume,
    volume_key,
)

KINDS = list(SamplerKind)


def test_surface_area_known_values():
    assert surface_area(2, 1.0) == pytest.approx(2 * math.pi)
    assert surface_area(3, 2.0) == pytest.approx(16 * math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)
    with pytest.raises(ValueError):
        surface_area(0, 1.0)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("d", [2, 3])
def test_points_on_sphere_and_weights_sum_to_one(kind, d):
    rng = np.random.default_rng(0)
    ball = Ball(np.full(d, 0.2), 0.7)
    s = sample_surface(ball, 16, kind, rng)
    assert np.allclose(np.linalg.norm(s.points - ball.center, axis=-1), 0.7, atol=1e-9)
    assert np.allclose(np.linalg.norm(s.directions, axis=-1), 1.0)
    assert s.weights.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("d", [4, 5])
def test_gauss_legendre_rejected_above_three_dimensions(d):
    with pytest.raises(UnsupportedConfiguration):
        sample_surface(Ball(np.zeros(d), 1.0), 8, "gauss_legendre")


def test_constant_integrand_exact():
    rng = np.random.default_rng(1)
    s = sample_surface(Ball(np.zeros(3), 1.5), 100_000, "iid_gaussian", rng)
    assert np.sum(s.weights) * surface_area(3, 1.5) == pytest.approx(surface_area(3, 1.5))


@pytest.mark.parametrize("d", [2, 3, 5])
def test_cube_to_sphere_is_uniform(d):
    rng = np.random.default_rng(2)
    x = cube_to_sphere(rng.random((200_000, d - 1)), d)
    assert np.allclose(np.linalg.norm(x, axis=1), 1.0)
    assert np.allclose(x.mean(axis=0), 0.0, atol=0.01)
    assert np.allclose(np.mean(x**2, axis=0), 1.0 / d, atol=0.01)


def test_additive_recursion_and_alphas():
    a = golden_alphas(1)
    assert a[0] == pytest.approx(2 / (1 + math.sqrt(5)))
    x = additive_recursion(5, 2)
    assert x.shape == (5, 2)
    assert np.allclose(np.mod(x[1] - x[0], 1.0), golden_alphas(2))


def test_lattice_equally_spaced_in_2d():
    s = sample_surface(Ball(np.zeros(2), 1.0), 8, "lattice", rotation="none")
    ang = np.sort(np.mod(np.arctan2(s.points[:, 1], s.points[:, 0]), 2 * np.pi))
    assert np.allclose(np.diff(ang), 2 * np.pi / 8)


@pytest.mark.parametrize("kind", [k for k in KINDS if k.deterministic])
def test_deterministic_samplers_repeat_per_volume(kind):
    ball = Ball(np.array([0.1, -0.3, 0.2]), 0.5)
    a = sample_surface(ball, 12, kind, seed=3)
    b = sample_surface(ball, 12, kind, seed=3)
    assert np.array_equal(a.points, b.points)
    other = sample_surface(Ball(np.array([0.1, -0.3, 0.2]), 0.6), 12, kind, seed=3)
    assert not np.allclose(a.directions, other.directions)


def test_volume_key_depends_on_every_parameter():
    p = np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.30000000000000004]])
    k = volume_key(p, 0)
    assert k[0] != k[1]
    assert volume_key(p, 1)[0] != k[0]


def test_gauss_legendre_exact_for_polynomials():
    s = sample_surface(Ball(np.zeros(3), 1.0), 32, "gauss_legendre", rotation="none")
    z = s.directions[:, 2]
    assert np.sum(s.weights * z**2) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert np.sum(s.weights * z**4) == pytest.approx(1.0 / 5.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_plane_basis_right_handed(a, b, c):
    n = np.array([[a, b, c]])
    if np.linalg.norm(n) < 1e-3:
        return
    n = n / np.linalg.norm(n)
    e1, e2 = plane_basis(n)
    assert np.allclose(np.cross(e1, e2), n)
    assert abs(float(np.sum(e1 * n))) < 1e-12


def test_disk_boundary_tangents():
    disk = Disk(np.zeros(3), np.array([0.0, 0.0, 1.0]), 2.0)
    s = sample_disk_boundary(disk, 64, "iid_gaussian", np.random.default_rng(0))
    assert np.allclose(np.linalg.norm(s.points, axis=-1), 2.0)
    assert np.allclose(np.sum(s.points * s.directions, axis=-1), 0.0)
    # counter-clockwise about +z
    assert np.all(np.cross(s.points, s.directions)[:, 2] > 0)


def test_shape_validation():
    with pytest.raises(ValueError):
        Ball(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        Disk(np.zeros(3), np.array([0.0, 0.0, 2.0]), 1.0)
    with pytest.raises(ValueError):
        Sampler(SamplerKind.QMC, rotation="spin")


def test_training_volume_profiles():
    rng = np.random.default_rng(3)
    c, r = sample_training_balls("box", 1000, 2, rng)
    assert np.all(np.abs(c) <= 1) and np.all((r >= 0.1) & (r <= 1.5))
    c, r = sample_training_balls("unit_ball_volume", 1000, 3, rng)
    assert np.all(np.linalg.norm(c, axis=1) <= 1) and np.all((r > 0) & (r <= 1))
    with pytest.raises(ValueError):
        sample_training_balls("sphere", 3, 2, rng)
    c, n, r = sample_training_disks(100, rng)
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0) and np.all(r > 0)


def test_enclosed_charge():
    q = enclosed_charge([[0, 0], [2, 2]], [1.0, 0.5], [[0.5, 0.0], [2.0, 2.5]], [2.0, -1.0])
    assert np.allclose(q, [2.0, -1.0])


def test_enclosed_current_straight_wire():
    seg = np.array([[[0.0, 0.0, -5.0], [0.0, 0.0, 5.0]]])
    up = enclosed_current([[0, 0, 0]], [[0, 0, 1.0]], [1.0], seg, 2.0)
    down = enclosed_current([[0, 0, 0]], [[0, 0, -1.0]], [1.0], seg, 2.0)
    miss = enclosed_current([[3, 0, 0]], [[0, 0, 1.0]], [1.0], seg, 2.0)
    assert np.allclose([up[0], down[0], miss[0]], [2.0, -2.0, 0.0])
