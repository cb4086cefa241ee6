import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intpinn import nn
from intpinn.evaluation import (
    DegenerateOutput,
    MaxwellIid,
    PoissonGrid,
    PoissonRobustGrid,
    SmolGrid,
    best_epoch,
    centered_mse,
    eval_points,
    make_evaluator,
    maxwell_curl_eval,
    maxwell_points,
    normalize,
    normalized_mse,
    regular_grid,
    robust_grid,
    robust_poisson_eval,
    smol_eval,
)
from intpinn.problems import MaxwellProblem, PoissonProblem, SmolProblem, centered_charge, smol_ground_truth
from intpinn.trainers import MetricRecord


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 1000))
def test_normalized_mse_affine_invariant(a, b, seed):
    x = np.random.default_rng(seed).normal(size=50)
    assert normalized_mse(a * x + b, x) == pytest.approx(0.0, abs=1e-12)
    assert normalized_mse(-x, x) == pytest.approx(4.0)


def test_normalize_postconditions_and_degenerate():
    v = normalize(np.random.default_rng(0).normal(3.0, 2.0, 1000))
    assert abs(v.mean()) < 1e-12 and abs(v.var() - 1.0) < 1e-9
    with pytest.raises(DegenerateOutput):
        normalize(np.ones(5))
    with pytest.raises(DegenerateOutput):
        normalize(np.array([1.0, np.nan]))


def test_centered_mse():
    a = np.random.default_rng(0).normal(size=(20, 3))
    assert centered_mse(a + 7.0, a) == pytest.approx(0.0, abs=1e-20)
    assert centered_mse(2 * a - a.mean(axis=0), a) > 0


def test_regular_grid():
    g = regular_grid(2, 4)
    assert g.shape == (16, 2)
    assert np.allclose(np.unique(g[:, 0]), [-0.75, -0.25, 0.25, 0.75])


def test_robust_grid_shape_and_center():
    p = centered_charge(3)
    pts = robust_grid(p, PoissonRobustGrid(10, 7, 500), np.random.default_rng(0))
    assert pts.shape == (70, 3)
    r = np.linalg.norm(pts, axis=1).reshape(10, 7)
    assert np.allclose(r, r[:, :1])
    assert np.all(np.diff(r[:, 0]) >= 0)


def test_robust_eval_converges_with_grid_size():
    p = centered_charge(2)
    net = nn.init(nn.MlpConfig(2, 1, 16, 2, "tanh"), 0)
    a = robust_poisson_eval(net, p, PoissonRobustGrid(100, 100, 1000), np.random.default_rng(0))
    b = robust_poisson_eval(net, p, PoissonRobustGrid(200, 200, 4000), np.random.default_rng(1))
    assert abs(a - b) / b < 0.05


def test_profile_validation():
    with pytest.raises(ValueError):
        make_evaluator(PoissonProblem(), PoissonGrid(0), np.random.default_rng(0))
    with pytest.raises(ValueError):
        make_evaluator(SmolProblem(), SmolGrid(), np.random.default_rng(0))
    with pytest.raises(TypeError):
        make_evaluator(PoissonProblem(), object(), np.random.default_rng(0))


def test_evaluator_is_pure_function_of_params():
    ev = make_evaluator(PoissonProblem(), PoissonRobustGrid(20, 20, 200), np.random.default_rng(0))
    net = nn.init(nn.MlpConfig(2, 1, 8, 2), 0)
    assert ev(net) == ev(net)


def test_maxwell_metrics_positive_for_untrained_net():
    prob = MaxwellProblem()
    pts = maxwell_points(50, np.random.default_rng(0))
    assert pts.shape == (50, 3)
    ev = make_evaluator(prob, MaxwellIid(200), np.random.default_rng(0))
    net = nn.init(nn.MlpConfig(3, 3, 8, 2, "tanh"), 0)
    assert ev(net) > 0
    assert maxwell_curl_eval(net, prob, pts) > 0


def test_smol_eval_against_grid():
    g = smol_ground_truth(SmolProblem(), 32, 64)
    cfg = nn.MlpConfig(2, 1, 1, 1, "tanh")
    one = nn.MlpParams(cfg, np.array([0.0, 0.0, 0.0, 0.0, 1.0]))
    two = nn.MlpParams(cfg, np.array([0.0, 0.0, 0.0, 0.0, 2.0]))
    d1 = smol_eval(one, g, SmolGrid(1, 1))
    assert d1 == pytest.approx(np.mean((g.density - 1.0) ** 2))
    assert smol_eval(two, g, SmolGrid(1, 1)) == pytest.approx(np.mean((g.density - 2.0) ** 2))


def test_eval_points():
    assert eval_points(PoissonProblem(), PoissonGrid(8), None).shape == (64, 2)
    assert eval_points(SmolProblem(), SmolGrid(), None) is None


def test_best_epoch_ties_to_earliest():
    recs = [MetricRecord(e, 0.0, 0.0, v, False) for e, v in [(0, 2.0), (10, 0.5), (20, 0.5), (30, 0.7)]]
    assert best_epoch(recs).epoch == 10
    with pytest.raises(ValueError):
        best_epoch([])
