import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intpinn import nn
from intpinn.autodiff import Tape
from intpinn.geometry import Sampler, SamplerKind, surface_area
from intpinn.oracles import circulation_identity, flux_identity, separation_ratio
from intpinn.problems import (
    GroundTruthGrid,
    MaxwellProblem,
    PoissonProblem,
    SingularityError,
    SmolProblem,
    assemble,
    evals_per_volume,
    maxwell_analytic,
    maxwell_residual,
    poisson_analytic,
    poisson_residual,
    residual_values,
    smol_ground_truth,
    smol_kernel,
    smol_residual,
    tile_volumes,
)
from intpinn.problems.residual import per_draw_estimates, quantity, side_sums, tape_side_sums


def linear_net(w):
    """U(x) = w . x from two relu units with a large bias."""
    d = len(w)
    cfg = nn.MlpConfig(d, 1, 2, 1, "relu")
    # 0.5 relu(w.x + 100) - 0.5 relu(-w.x + 100) = w.x while |w.x| < 100
    flat = np.concatenate([np.stack([w, -w], axis=1).ravel(), [100.0, 100.0], [0.5, -0.5], [0.0]])
    return nn.MlpParams(cfg, flat)


def test_linear_net_helper():
    p = linear_net(np.array([1.0, -2.0]))
    x = np.array([[0.3, 0.4], [-1.0, 2.0]])
    assert np.allclose(nn.forward(p, x)[:, 0], x @ [1.0, -2.0])


def test_poisson_coefficients():
    s = poisson_residual(PoissonProblem(), (np.zeros((1, 2)), np.array([0.5])), Sampler("iid_gaussian"), 2, 6, np.random.default_rng(0), scale_m=5.0)
    area = surface_area(2, 0.5)
    assert np.allclose(s.main.coef, area / (5.0 * 2))
    assert np.allclose(s.target.coef, -area * 4.0 / (5.0 * 6))
    assert s.label[0] == pytest.approx(1.0)


def test_default_split_weights_every_point_equally():
    s = poisson_residual(PoissonProblem(), (np.zeros((1, 2)), np.array([0.5])), Sampler("iid_gaussian"), 3, 7, np.random.default_rng(0))
    assert s.scale_M == pytest.approx(10 / 3)
    assert np.allclose(np.r_[s.main.coef, -s.target.coef], surface_area(2, 0.5) / 10)


def test_constant_field_has_zero_flux_on_lattice():
    p = linear_net(np.array([0.7, -0.2]))
    balls = (np.array([[0.3, 0.1], [2.0, 2.0]]), np.array([0.5, 0.2]))
    s = poisson_residual(PoissonProblem(), balls, Sampler("lattice", rotation="none"), 4, 12)
    assert np.allclose(residual_values(p, s), -s.label, atol=1e-12)


def test_residual_rejects_bad_sizes():
    b = (np.zeros((1, 2)), np.array([0.5]))
    with pytest.raises(ValueError):
        poisson_residual(PoissonProblem(), b, Sampler(), 0, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        poisson_residual(PoissonProblem(), b, Sampler(), 1, 4, np.random.default_rng(0), scale_m=0.5)
    with pytest.raises(ValueError):
        poisson_residual(PoissonProblem(3), b, Sampler(), 1, 4, np.random.default_rng(0))


@pytest.mark.parametrize("d", [2, 3, 5])
def test_poisson_field_is_gradient_of_potential(d):
    rng = np.random.default_rng(d)
    pos = rng.normal(size=(2, d))
    q = np.array([1.0, -0.5])
    x = rng.normal(size=(4, d)) + 3.0
    _, e = poisson_analytic(d, pos, q, x)
    h = 1e-6
    for k in range(d):
        step = np.zeros(d)
        step[k] = h
        fd = (poisson_analytic(d, pos, q, x + step)[0] - poisson_analytic(d, pos, q, x - step)[0]) / (2 * h)
        assert np.allclose(fd, e[:, k], rtol=1e-6)


def test_poisson_singularity():
    with pytest.raises(SingularityError):
        poisson_analytic(2, [[0.0, 0.0]], [1.0], [0.0, 0.0])


@pytest.mark.parametrize("d", [2, 3, 10])
def test_flux_identity_small_scale(d):
    rng = np.random.default_rng(1)
    assert flux_identity(d, 10, 20_000, rng, inside=True, tolerance=0.03).passed
    assert flux_identity(d, 10, 20_000, rng, inside=False, tolerance=0.03).passed


def test_separation_ratio_bounds_second_moment():
    for d in (2, 3, 5):
        r = separation_ratio(d)
        assert (1 + r * r) / (1 - r * r) ** (d - 1) == pytest.approx(1.8)


def test_maxwell_field_is_curl_of_potential():
    prob = MaxwellProblem()
    x = np.random.default_rng(0).normal(size=(5, 3)) * 0.3 + 1.5
    _, b = maxwell_analytic(prob, x)
    h = 1e-6
    jac = np.empty((5, 3, 3))  # d A_i / d x_k
    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        jac[:, :, k] = (maxwell_analytic(prob, x + step)[0] - maxwell_analytic(prob, x - step)[0]) / (2 * h)
    curl = np.stack([jac[:, 2, 1] - jac[:, 1, 2], jac[:, 0, 2] - jac[:, 2, 0], jac[:, 1, 0] - jac[:, 0, 1]], axis=1)
    assert np.allclose(curl, b, rtol=1e-5, atol=1e-8)


def test_circulation_identity_small_scale():
    assert circulation_identity(MaxwellProblem(), 5, 20_000, np.random.default_rng(2), tolerance=0.03).passed


def test_maxwell_validation():
    with pytest.raises(ValueError):
        MaxwellProblem(vertices=((0, 0, 0), (1, 0, 0)))
    with pytest.raises(ValueError):
        MaxwellProblem(vertices=((0, 0, 0), (0, 0, 0), (1, 0, 0)))


def test_curl_quantity_matches_tape():
    p = nn.init(nn.MlpConfig(3, 3, 8, 2, "tanh"), 0)
    rng = np.random.default_rng(0)
    vols = MaxwellProblem().sample_volumes(3, rng)
    s = maxwell_residual(MaxwellProblem(), vols, Sampler(), 1, 4, rng)
    tape = Tape()
    nodes = nn.param_nodes(tape, p)
    taped = tape_side_sums(tape, p.config, nodes, s.target, s.n_volumes).value
    assert np.allclose(taped, side_sums(p, s.target, s.n_volumes), atol=1e-12)


def test_per_draw_estimates_average_to_target_side():
    p = nn.init(nn.MlpConfig(2, 1, 8, 2, "silu"), 0)
    rng = np.random.default_rng(0)
    s = poisson_residual(PoissonProblem(), PoissonProblem().sample_volumes(4, rng), Sampler(), 1, 6, rng)
    per = per_draw_estimates(p, s)
    assert per.shape == (4, 6)
    assert np.allclose(per.mean(axis=1), side_sums(p, s.target, 4))


def test_target_halves():
    rng = np.random.default_rng(0)
    s = poisson_residual(PoissonProblem(), PoissonProblem().sample_volumes(2, rng), Sampler(), 1, 4, rng)
    a, b = s.target_halves()
    assert len(a) == len(b) == 4
    assert np.allclose(a.coef.sum() + b.coef.sum(), 2 * s.target.coef.sum())
    odd = poisson_residual(PoissonProblem(), PoissonProblem().sample_volumes(2, rng), Sampler(), 1, 3, rng)
    with pytest.raises(ValueError):
        odd.target_halves()


def test_assemble_dispatch_and_costs():
    rng = np.random.default_rng(0)
    for prob in (PoissonProblem(), MaxwellProblem(), SmolProblem()):
        vols = prob.sample_volumes(3, rng)
        s = assemble(prob, vols, Sampler(), 1, 2, rng)
        assert s.n_volumes == 3
    assert evals_per_volume(PoissonProblem(), 1, 10) == 11
    assert evals_per_volume(SmolProblem(), 1, 10) == 41
    with pytest.raises(ValueError):
        assemble(SmolProblem(), SmolProblem().sample_volumes(2, rng), Sampler("qmc"), 1, 2, rng)
    with pytest.raises(TypeError):
        assemble(object(), None, Sampler(), 1, 1, rng)
    tiled = tile_volumes((np.arange(2), np.arange(2) + 10), 3)
    assert list(tiled[0]) == [0, 1, 0, 1, 0, 1]


def test_smol_kernel():
    assert smol_kernel(0.0, 0.0) == 0.0
    assert smol_kernel(1.0, 1.0) == pytest.approx(1.23 * 1.14**3)
    assert smol_kernel(0.04, 0.09) == pytest.approx(1.23 * 0.5**3)


def test_smol_residual_is_unbiased_for_constant_density():
    # n == 1 gives dn/dt = 0, gain = x * E[K(x-s, s)], loss = E[K(x, s')]
    cfg = nn.MlpConfig(2, 1, 1, 1, "tanh")
    one = nn.MlpParams(cfg, np.array([0.0, 0.0, 0.0, 0.0, 1.0]))
    x = np.array([0.5])
    rng = np.random.default_rng(0)
    s = smol_residual(SmolProblem(), x, np.array([0.3]), 1, 200_000, rng)
    u = (np.arange(100_000) + 0.5) / 100_000
    gain = 0.5 * np.mean(smol_kernel(0.5 - 0.5 * u, 0.5 * u))
    loss = np.mean(smol_kernel(0.5, u))
    assert residual_values(one, s)[0] == pytest.approx(-(gain - loss), rel=1e-2)


def test_smol_residual_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        smol_residual(SmolProblem(), np.array([1.5]), np.array([0.1]), 1, 2, rng)
    with pytest.raises(ValueError):
        smol_residual(SmolProblem(), np.array([0.5, 0.2]), np.array([0.1]), 1, 2, rng)
    with pytest.raises(ValueError):
        smol_residual(SmolProblem(), np.array([0.5]), np.array([0.1]), 1, 0, rng)


def test_ground_truth_basic_properties(tmp_path):
    g = smol_ground_truth(SmolProblem(), 64, 128)
    assert np.allclose(g.density[0], 1.0)
    total = g.density.sum(axis=1)
    assert np.all(np.diff(total) <= 1e-12)
    g.save(tmp_path / "g.npz")
    h = GroundTruthGrid.load(tmp_path / "g.npz")
    assert np.array_equal(h.density, g.density)
    g.save_csv(tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "t,x1,n"


def test_ground_truth_self_converges():
    p = SmolProblem()
    a = smol_ground_truth(p, 128, 256)
    b = smol_ground_truth(p, 256, 512)
    change = np.linalg.norm(np.interp(a.x, b.x, b.density[-1]) - a.density[-1]) / np.linalg.norm(a.density[-1])
    assert change < 0.01


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(1.0, 1e3))
def test_coefficients_sum_to_area(n_main, n_target, m):
    s = poisson_residual(PoissonProblem(), (np.zeros((1, 2)), np.array([0.7])), Sampler(), n_main, n_target, np.random.default_rng(0), m)
    area = surface_area(2, 0.7)
    assert s.main.coef.sum() == pytest.approx(area / m)
    assert -s.target.coef.sum() == pytest.approx(area * (m - 1) / m)
