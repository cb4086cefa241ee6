import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intpinn import lintd


def two_state():
    return lintd.AbstractLinearSystem(
        np.eye(2), np.array([0.5, 0.5]), np.array([[0.0, 1.0], [1.0, 0.0]]), 0.5 * np.eye(2), np.array([1.0, 0.0])
    )


def small_system(seed, sigma=0.6, S=12, d=3, kind="kernel"):
    return lintd.random_system(S, d, sigma, np.random.default_rng(seed), kind)


def test_two_state_fixed_point():
    theta = lintd.solve_projected_fixed_point(two_state()).theta
    assert np.allclose(theta, [4 / 3, 2 / 3], atol=1e-12)
    assert np.allclose(lintd.solve_standard_fixed_point(two_state()).theta, theta)


def test_two_state_sgd_converges():
    run = lintd.sgd_delayed_target(two_state(), 20_000, np.random.default_rng(0))
    assert np.linalg.norm(run.theta[0] - [4 / 3, 2 / 3]) < 1e-2
    assert run.steps_to_tol[0] > 0 and not run.diverged[0]


def test_zero_noise_system_converges():
    # deterministic P and Psi = 0: plain SGD on a quadratic
    s = lintd.AbstractLinearSystem(np.eye(3), np.full(3, 1 / 3), np.eye(3), np.zeros((3, 3)), np.array([1.0, -1.0, 0.5]))
    run = lintd.sgd_delayed_target(s, 5000, np.random.default_rng(1))
    assert np.allclose(run.theta[0], s.Y, atol=1e-2)


def test_system_validation():
    with pytest.raises(ValueError):
        lintd.AbstractLinearSystem(np.eye(2), np.array([0.6, 0.6]), np.eye(2), np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        lintd.AbstractLinearSystem(np.eye(2), np.array([0.5, 0.5]), np.full((2, 2), 0.6), np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        lintd.random_system(3, 3, 0.5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        lintd.random_system(5, 2, 1.0, np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_random_systems_hit_target_radius(seed, sigma):
    s = small_system(seed, sigma)
    s.check()
    assert lintd.spectral_radius(s.PL) == pytest.approx(sigma, rel=1e-9)
    assert np.allclose(s.Psi, s.Lam @ s.Phi)


def test_same_seed_same_system():
    a, b = small_system(5), small_system(5)
    assert np.array_equal(a.Phi, b.Phi) and np.array_equal(a.P, b.P)


def test_identity_lambda_bound():
    s = small_system(2, 0.7, kind="identity")
    assert lintd.spectral_radius(s.PL) <= 0.7 + 1e-12


def test_projection_properties():
    s = small_system(3)
    rng = np.random.default_rng(0)
    h = rng.normal(size=s.S)
    ph = lintd.projection(s, h)
    assert np.allclose(lintd.projection(s, ph), ph, atol=1e-12)
    inside = s.Phi @ rng.normal(size=s.d)
    assert np.allclose(lintd.projection(s, inside), inside, atol=1e-12)
    assert lintd.d_norm(s, ph) <= lintd.d_norm(s, h) + 1e-12


def test_update_operator_contracts():
    s = small_system(4, 0.8)
    rng = np.random.default_rng(0)
    assert np.allclose(lintd.update_op(s, np.zeros(s.S)), s.Y)
    for _ in range(20):
        h1, h2 = rng.normal(size=(2, s.S))
        lhs = lintd.d_norm(s, lintd.update_op(s, h1) - lintd.update_op(s, h2))
        assert lhs <= 0.8 * lintd.d_norm(s, h1 - h2) + 1e-12


def test_fixed_point_residuals():
    for seed in range(30):
        s = small_system(seed)
        theta = lintd.solve_projected_fixed_point(s).theta
        assert lintd.projected_residual(s, theta) < 1e-10
        std = lintd.solve_standard_fixed_point(s).theta
        assert np.linalg.norm(lintd.standard_objective_grad(s, std)) < 1e-10


def test_realizable_fixed_points_coincide():
    s = lintd.realizable(small_system(7), np.random.default_rng(0))
    a = lintd.solve_projected_fixed_point(s).theta
    b = lintd.solve_standard_fixed_point(s).theta
    assert np.allclose(a, b, atol=1e-9)
    bound = lintd.check_error_bound(s)
    assert bound.lhs < 1e-12 and bound.rhs < 1e-12 and bound.satisfied


def test_error_bound_holds_on_random_systems():
    for seed in range(50):
        assert lintd.check_error_bound(small_system(seed, 0.1 + 0.8 * (seed % 9) / 8)).satisfied


def test_identity_features_have_no_approximation_error():
    s = lintd.random_system(6, 2, 0.5, np.random.default_rng(0))
    s = lintd.AbstractLinearSystem(np.eye(6), s.D, s.P, s.Lam, s.Y)
    assert lintd.check_error_bound(s).lhs < 1e-20


def test_spectral_radius():
    assert lintd.spectral_radius(np.eye(4)) == pytest.approx(1.0)
    assert lintd.spectral_radius(np.diag([0.3, -0.7])) == pytest.approx(0.7)
    rng = np.random.default_rng(0)
    for n in range(2, 7):
        m = rng.normal(size=(n, n))
        roots = np.roots(np.poly(m))
        assert lintd.spectral_radius(m) == pytest.approx(np.max(np.abs(roots)), rel=1e-8)
    big = np.diag(np.linspace(-0.9, 0.5, 300))
    assert lintd.spectral_radius(big) == pytest.approx(0.9, rel=1e-6)
    with pytest.raises(ValueError):
        lintd.spectral_radius(np.zeros((2, 3)))


def test_sampled_updates_are_unbiased():
    s = small_system(8)
    A, b = lintd.sample_updates(s, 1_000_000, np.random.default_rng(0))
    se = A.std(axis=0) / np.sqrt(A.shape[0])
    assert np.all(np.abs(A.mean(axis=0) - s.A) <= 3 * se + 1e-12)
    se_b = b.std(axis=0) / np.sqrt(b.shape[0])
    assert np.all(np.abs(b.mean(axis=0) - s.b) <= 3 * se_b + 1e-12)


def test_sgd_run_is_reproducible_and_checks_shapes():
    systems = [small_system(1), small_system(2)]
    a = lintd.sgd_delayed_target(systems, 3000, np.random.default_rng(4), checkpoint_every=1000)
    b = lintd.sgd_delayed_target(systems, 3000, np.random.default_rng(4), checkpoint_every=1000)
    assert np.array_equal(a.theta, b.theta)
    assert a.errors.shape == (3, 2) and list(a.checkpoints) == [1000, 2000, 3000]
    with pytest.raises(ValueError):
        lintd.sgd_delayed_target([small_system(1), small_system(1, S=10)], 10, np.random.default_rng(0))


def test_divergence_flag():
    s = two_state()
    run = lintd.sgd_delayed_target(s, 100, np.random.default_rng(0), schedule=lambda t: 50.0, blowup=1e3)
    assert run.diverged[0]


def test_iteration_count_contrast():
    s = small_system(11, 0.5, S=8, d=2)
    gd = lintd.full_gradient_descent(s, 400)
    k = np.arange(1, 401)
    keep = gd > 1e-12
    r = np.corrcoef(k[keep], np.log(gd[keep]))[0, 1]
    assert r * r > 0.95  # linear convergence: log error falls linearly in steps
    run = lintd.sgd_delayed_target(s, 200_000, np.random.default_rng(0), checkpoint_every=1000)
    err = run.errors[:, 0]
    slope = np.polyfit(np.log(run.checkpoints[10:]), np.log(err[10:] + 1e-300), 1)[0]
    assert -1.5 < slope < -0.2  # polynomial, not geometric, decay
