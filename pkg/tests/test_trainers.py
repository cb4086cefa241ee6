import numpy as np
import pytest

from intpinn import nn
from intpinn.evaluation import PoissonGrid, make_evaluator
from intpinn.geometry import Sampler
from intpinn.problems import MaxwellProblem, PoissonProblem, SmolProblem, assemble
from intpinn.problems.residual import residual_values
from intpinn.streams import stream
from intpinn.trainers import (
    ConfigurationError,
    EstimatorConfig,
    TapedNet,
    TrainSettings,
    VolumeStream,
    _drift,
    drift_warmup,
    drift_points,
    estimator_loss,
    excess_variance_estimate,
    loss_double_sampling,
    loss_standard,
    train,
    value_and_grad,
)

NET = nn.MlpConfig(2, 1, 8, 2, "tanh")
FAST = TrainSettings(eval_every=5, excess_volumes=4, excess_draws=4)


def sample(n_target=4, seed=0, n_vol=6, kind="iid_gaussian"):
    rng = np.random.default_rng(seed)
    prob = PoissonProblem()
    return assemble(prob, prob.sample_volumes(n_vol, rng), Sampler(kind), 1, n_target, rng)


@pytest.mark.parametrize(
    "kw",
    [
        dict(variant="bogus"),
        dict(n_target=0),
        dict(tau=1.5),
        dict(lam=-1),
        dict(scale_m=0.5),
        dict(variant="deterministic", sampler="iid_gaussian"),
        dict(epochs=-1),
        dict(batch_volumes=0),
        dict(sampler="sobol"),
    ],
)
def test_estimator_config_validation(kw):
    with pytest.raises((ConfigurationError, ValueError)):
        EstimatorConfig(**kw)


def test_budget_matching():
    prob = PoissonProblem()
    assert EstimatorConfig(n_target=1).volumes_per_epoch(prob) == 500
    assert EstimatorConfig(n_target=99).volumes_per_epoch(prob) == 10
    assert EstimatorConfig("double_sampling", n_target=1).draws == 2
    assert EstimatorConfig(batch_volumes=7).volumes_per_epoch(prob) == 7


def test_standard_loss_matches_numpy_residuals():
    p = nn.init(NET, 0)
    s = sample()
    value = float(loss_standard(TapedNet.of(p), s).value)
    assert value == pytest.approx(np.mean(residual_values(p, s) ** 2), rel=1e-12)


def test_double_sampling_is_product_of_half_residuals():
    p = nn.init(NET, 0)
    s = sample(n_target=4)
    a, b = s.target_halves()
    from intpinn.problems.residual import side_sums

    f = side_sums(p, s.main, s.n_volumes)
    r1 = f - side_sums(p, a, s.n_volumes) - s.label
    r2 = f - side_sums(p, b, s.n_volumes) - s.label
    assert float(loss_double_sampling(TapedNet.of(p), s).value) == pytest.approx(np.mean(r1 * r2), rel=1e-10)
    with pytest.raises(ValueError):
        loss_double_sampling(TapedNet.of(p), sample(n_target=3))


def test_delayed_target_equals_standard_when_target_is_main():
    p = nn.init(NET, 1)
    s = sample()
    est = EstimatorConfig("delayed_target", n_target=4, lam=3.0)
    dt = float(estimator_loss(TapedNet.of(p), s, est, p.copy()).value)
    assert dt == pytest.approx(float(loss_standard(TapedNet.of(p), s).value), rel=1e-12)


def test_delayed_target_gradient_ignores_target_side():
    # with lam = 0 the gradient only flows through the main side
    p = nn.init(NET, 2)
    s = sample()
    target = nn.init(NET, 3)
    est = EstimatorConfig("delayed_target", n_target=4, lam=0.0)
    _, g = value_and_grad(lambda net: estimator_loss(net, s, est, target), p)
    from intpinn.problems.residual import side_sums

    def numeric(flat):
        q = nn.MlpParams(NET, flat)
        r = side_sums(q, s.main, s.n_volumes) - side_sums(target, s.target, s.n_volumes) - s.label
        return np.mean(r * r)

    idx = np.arange(0, NET.n_params, 7)
    h = 1e-6
    fd = [(numeric(p.flat + h * e) - numeric(p.flat - h * e)) / (2 * h) for e in np.eye(NET.n_params)[idx]]
    assert np.allclose(g[idx], fd, rtol=1e-5, atol=1e-8)


def test_delayed_target_requires_target_and_deterministic_requires_lattice():
    p = nn.init(NET, 0)
    with pytest.raises(ConfigurationError):
        estimator_loss(TapedNet.of(p), sample(), EstimatorConfig("delayed_target"), None)
    with pytest.raises(ConfigurationError):
        estimator_loss(TapedNet.of(p), sample(), EstimatorConfig("deterministic", sampler="lattice"))
    assert np.isfinite(float(estimator_loss(TapedNet.of(p), sample(kind="lattice"), EstimatorConfig("deterministic", sampler="lattice")).value))


def test_excess_variance_scales_inversely_with_n():
    p = nn.init(NET, 0)
    prob = PoissonProblem()
    vols = prob.sample_volumes(16, np.random.default_rng(0))
    # a main point fixed by the lattice leaves only target noise
    v1 = excess_variance_estimate(p, prob, vols, Sampler("iid_gaussian"), 1, 1, 400, np.random.default_rng(1), scale_m=2.0)
    v10 = excess_variance_estimate(p, prob, vols, Sampler("iid_gaussian"), 1, 10, 400, np.random.default_rng(1), scale_m=2.0)
    assert v1 > v10 > 0
    with pytest.raises(ValueError):
        excess_variance_estimate(p, prob, vols, Sampler(), 1, 1, 1, np.random.default_rng(0))


def test_volume_stream_independent_of_batch_size():
    prob = PoissonProblem()
    a = VolumeStream(prob, np.random.default_rng(0), block=16)
    b = VolumeStream(prob, np.random.default_rng(0), block=16)
    xa = np.concatenate([a.take(5)[0] for _ in range(8)])
    xb = np.concatenate([b.take(20)[0] for _ in range(2)])
    assert np.array_equal(xa, xb)


def test_zero_epoch_run_reports_initial_metrics():
    prob = PoissonProblem()
    ev = make_evaluator(prob, PoissonGrid(8), stream(0, "eval"))
    r = train(prob, NET, EstimatorConfig(epochs=0), 0, ev, FAST)
    assert [rec.epoch for rec in r.records] == [0]
    assert np.isnan(r.records[0].train_loss)
    assert r.records[0].eval_mse == pytest.approx(ev(nn.init(NET, stream(0, "init"))))


def test_seed_matched_runs_are_identical():
    prob = PoissonProblem()
    est = EstimatorConfig(n_target=2, epochs=12, batch_volumes=8)
    a = train(prob, NET, est, 3, None, FAST)
    b = train(prob, NET, est, 3, None, FAST)
    assert np.array_equal(a.params.flat, b.params.flat)
    assert np.array_equal([r.train_loss for r in a.records], [r.train_loss for r in b.records], equal_nan=True)


def test_estimators_share_volume_sequence_and_init():
    prob = PoissonProblem()
    runs = [
        train(prob, NET, EstimatorConfig(v, n_target=n, epochs=3, **kw), 5, None, FAST)
        for v, n, kw in [("standard", 1, {}), ("standard", 50, {}), ("double_sampling", 1, {}), ("delayed_target", 1, {})]
    ]
    logs = [np.asarray(r.volume_log) for r in runs]
    assert all(np.array_equal(logs[0], log) for log in logs[1:])
    assert len(logs[0]) == 10


def test_training_reduces_loss():
    prob = PoissonProblem()
    est = EstimatorConfig(n_target=20, epochs=200, batch_volumes=32, lr=3e-3)
    r = train(prob, NET, est, 0, None, TrainSettings(eval_every=50, excess_volumes=4, excess_draws=4))
    losses = [rec.train_loss for rec in r.records[1:]]
    assert losses[-1] < losses[0]


def test_divergence_is_flagged():
    prob = PoissonProblem()
    est = EstimatorConfig(epochs=300, batch_volumes=8, lr=50.0)
    r = train(prob, nn.MlpConfig(2, 1, 8, 2, "relu"), est, 0, None, FAST)
    if r.diverged:
        assert r.records[-1].diverged and r.reason
    assert all(not rec.diverged for rec in r.records[:-1])


def test_drift_monitor():
    p = nn.init(NET, 0)
    pts = np.random.default_rng(0).normal(size=(50, 2))
    assert _drift(p, p.copy(), pts) == pytest.approx(0.0, abs=1e-12)
    scaled = nn.MlpParams(NET, p.flat.copy())
    scaled.flat[-9:] *= 5.0
    assert _drift(scaled, p, pts) < 1e-12  # pure rescaling is not drift
    flat = nn.MlpParams(NET, np.zeros(NET.n_params))
    assert _drift(p, flat, pts) == float("inf")


def test_drift_flag_stops_delayed_target():
    prob = PoissonProblem()
    pts = drift_points(prob, PoissonGrid(8), 0)
    est = EstimatorConfig("delayed_target", epochs=40, batch_volumes=8, tau=0.9, lam=0.0, scale_m=1000.0)
    r = train(prob, NET, est, 0, None, TrainSettings(eval_every=5, excess_volumes=4, excess_draws=4, drift_limit=-1.0), pts)
    assert r.diverged and "drift" in r.reason
    assert r.drift_log and r.drift_log[0][0] == 30  # first check after the warmup


def test_drift_warmup():
    assert drift_warmup(0.99) == pytest.approx(300.0)
    assert drift_warmup(1.0) == float("inf")


def test_input_dim_mismatch():
    with pytest.raises(ConfigurationError):
        train(PoissonProblem(), nn.MlpConfig(3, 1, 8, 2, "tanh"), EstimatorConfig(epochs=1), 0)


@pytest.mark.parametrize("prob,cfg", [(MaxwellProblem(), nn.MlpConfig(3, 3, 8, 2, "tanh")), (SmolProblem(), nn.MlpConfig(2, 1, 8, 2, "silu"))])
def test_other_problems_train(prob, cfg):
    est = EstimatorConfig("delayed_target", n_target=2, epochs=5, batch_volumes=8)
    r = train(prob, cfg, est, 0, None, TrainSettings(eval_every=5, excess_volumes=4, excess_draws=4))
    assert not r.diverged
    assert np.all(np.isfinite(r.params.flat))


def test_smol_drift_points_fall_back_to_collocation():
    from intpinn.evaluation import SmolGrid

    pts = drift_points(SmolProblem(), SmolGrid(), 0, n_fallback=30)
    assert pts.shape == (30, 2)
    assert np.all((pts >= 0) & (pts <= 1))


def test_delayed_target_reports_chosen_network():
    prob = PoissonProblem()
    ev = make_evaluator(prob, PoissonGrid(8), stream(0, "eval"))
    est = EstimatorConfig("delayed_target", epochs=10, batch_volumes=8, tau=0.9)
    by_target = train(prob, NET, est, 0, ev, FAST)
    by_main = train(prob, NET, est, 0, ev, TrainSettings(eval_every=5, excess_volumes=4, excess_draws=4, report="main"))
    assert by_target.params is by_target.target
    assert np.array_equal(by_target.main.flat, by_main.params.flat)
    assert by_target.records[-1].eval_mse == pytest.approx(ev(by_target.target))
    assert by_main.records[-1].eval_mse == pytest.approx(ev(by_main.main))
    with pytest.raises(ValueError):
        TrainSettings(report="both")


def test_excess_variance_zero_for_deterministic_sampler():
    p = nn.init(NET, 0)
    prob = PoissonProblem()
    vols = prob.sample_volumes(8, np.random.default_rng(0))
    v = excess_variance_estimate(p, prob, vols, Sampler("lattice"), 1, 4, 5, np.random.default_rng(1))
    assert v == pytest.approx(0.0, abs=1e-20)


def test_large_lambda_gradient_follows_regularizer():
    p = nn.init(NET, 4)
    target = nn.init(NET, 5)
    s = sample()
    big = EstimatorConfig("delayed_target", n_target=4, lam=1e8)
    _, g_big = value_and_grad(lambda net: estimator_loss(net, s, big, target), p)
    from intpinn.problems.residual import side_sums

    def reg(flat):
        d = side_sums(nn.MlpParams(NET, flat), s.main, s.n_volumes) - side_sums(target, s.main, s.n_volumes)
        return np.mean(d * d)

    h = 1e-6
    fd = np.array([(reg(p.flat + h * e) - reg(p.flat - h * e)) / (2 * h) for e in np.eye(NET.n_params)])
    cos = g_big @ fd / (np.linalg.norm(g_big) * np.linalg.norm(fd))
    assert cos > 1 - 1e-6


@pytest.mark.parametrize("variant", ["standard", "deterministic", "double_sampling", "delayed_target"])
@pytest.mark.parametrize("n", [1, 10, 100])
def test_compute_matching(variant, n):
    prob = PoissonProblem()
    kw = {"sampler": "lattice"} if variant == "deterministic" else {}
    est = EstimatorConfig(variant, n_target=n, **kw)
    evals = est.volumes_per_epoch(prob) * (est.n_main + est.draws)
    assert 1000 - (est.n_main + est.draws) < evals <= 1000


def test_heavy_regularization_never_flags_divergence():
    prob = PoissonProblem()
    cfg = nn.MlpConfig(2, 1, 16, 3, "silu")
    pts = drift_points(prob, PoissonGrid(16), 0)
    est = EstimatorConfig("delayed_target", epochs=600, batch_volumes=50, tau=0.99, lam=64.0, scale_m=1000.0)
    r = train(prob, cfg, est, 0, None, TrainSettings(eval_every=100, excess_volumes=4, excess_draws=4), pts)
    assert not r.diverged
    assert r.drift_log and max(d for _, d in r.drift_log) < 1.0
