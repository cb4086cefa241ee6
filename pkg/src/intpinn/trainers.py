"""Loss estimators for integral residuals and the training loop.

Residual for volume v:  r_v = F_v - G_v - y_v  (see ``problems.residual``).

* standard:        mean_v r_v^2, every term on the tape.
* deterministic:   the same, on a sampler with fixed points per volume.
* double sampling: mean_v r_v^(1) r_v^(2) with two independent target halves.
* delayed target:  mean_v (F_v - G_v^T - y_v)^2 + lam ((F_v - F_v^T) / s)^2, where the
  ^T terms use the Polyak-averaged target network and are constants, and s
  is the main coefficient relative to its default-M value (1 at default M).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .autodiff import Node, Tape, backward
from .evaluation import DegenerateOutput, eval_points, normalized_mse
from .geometry import Sampler, SamplerKind
from .problems import SmolProblem, assemble, evals_per_volume, tile_volumes
from .problems.residual import ResidualSample, residual_values, side_sums, tape_side_sums
from .problems.smoluchowski import ic_points, tape_initial_condition_loss
from .streams import stream

VARIANTS = ("standard", "deterministic", "double_sampling", "delayed_target")
DIVERGENCE_LOSS = 1e6


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    """Estimator and budget.

    ``n_target`` is N, the target draws per residual (per half for double
    sampling); ``n_main`` is N'.  ``scale_m`` None uses the even split
    M = (N' + N) / N'.  ``batch_volumes`` None derives the number of volumes
    per epoch from ``evals_per_epoch``.
    """

    variant: str = "standard"
    n_target: int = 1
    n_main: int = 1
    tau: float = 0.99
    lam: float = 1.0
    scale_m: float | None = None
    sampler: str = "iid_gaussian"
    evals_per_epoch: int = 1000
    batch_volumes: int | None = None
    epochs: int = 1000
    lr: float = 1e-3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown estimator {self.variant!r}; expected one of {VARIANTS}")
        if self.n_target < 1 or self.n_main < 1:
            raise ConfigurationError("N and N' must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError("tau must lie in [0, 1]")
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.scale_m is not None and self.scale_m < 1:
            raise ConfigurationError("M must be >= 1")
        kind = SamplerKind(self.sampler)
        if self.variant == "deterministic" and not kind.deterministic:
            raise ConfigurationError(f"the deterministic estimator needs a deterministic sampler, got {kind.value}")
        if self.epochs < 0 or self.evals_per_epoch < 1:
            raise ConfigurationError("epochs must be >= 0 and evals_per_epoch >= 1")
        if self.batch_volumes is not None and self.batch_volumes < 1:
            raise ConfigurationError("batch_volumes must be >= 1")

    @property
    def draws(self) -> int:
        """Target draws assembled per residual."""
        return 2 * self.n_target if self.variant == "double_sampling" else self.n_target

    def volumes_per_epoch(self, problem) -> int:
        if self.batch_volumes is not None:
            return self.batch_volumes
        return max(1, self.evals_per_epoch // evals_per_volume(problem, self.n_main, self.draws))


# -- taped network handle ----------------------------------------------------

@dataclass
class TapedNet:
    tape: Tape
    config: nn.MlpConfig
    nodes: list

    @classmethod
    def of(cls, params: nn.MlpParams, tape: Tape | None = None) -> "TapedNet":
        tape = Tape() if tape is None else tape
        return cls(tape, params.config, nn.param_nodes(tape, params))

    def sides(self, sample: ResidualSample, terms) -> Node:
        return tape_side_sums(self.tape, self.config, self.nodes, terms, sample.n_volumes)


def _residual(net: TapedNet, sample: ResidualSample, target_terms) -> Node:
    t = net.tape
    f = net.sides(sample, sample.main)
    g = net.sides(sample, target_terms)
    return t.sub(t.sub(f, g), t.constant(sample.label))


def loss_standard(net: TapedNet, sample: ResidualSample) -> Node:
    r = _residual(net, sample, sample.target)
    return net.tape.mean(net.tape.square(r))


def loss_deterministic(net: TapedNet, sample: ResidualSample) -> Node:
    kind = sample.meta.get("sampler")
    if kind is None or not SamplerKind(kind).deterministic:
        raise ConfigurationError("the deterministic loss needs residuals from a deterministic sampler")
    return loss_standard(net, sample)


def loss_double_sampling(net: TapedNet, sample: ResidualSample, debug: bool = False) -> Node:
    first, second = sample.target_halves()
    if debug and first.points.size and np.any(np.all(first.points == second.points, axis=tuple(range(1, first.points.ndim)))):
        raise ValueError("the two target draws share a sample")
    t = net.tape
    r1 = _residual(net, sample, first)
    r2 = _residual(net, sample, second)
    return t.mean(t.mul(r1, r2))


def loss_delayed_target(net: TapedNet, sample: ResidualSample, target: nn.MlpParams, lam: float) -> Node:
    t = net.tape
    f = net.sides(sample, sample.main)
    g_t = side_sums(target, sample.target, sample.n_volumes)
    f_t = side_sums(target, sample.main, sample.n_volumes)
    r = t.sub(f, t.constant(g_t + sample.label))
    # the gap is measured at the default-M scale so lam keeps its meaning as M grows
    reg = t.scale(t.sub(f, t.constant(f_t)), 1.0 / sample.meta.get("main_scale", 1.0))
    return t.add(t.mean(t.square(r)), t.scale(t.mean(t.square(reg)), lam))


def estimator_loss(net: TapedNet, sample: ResidualSample, est: EstimatorConfig, target: nn.MlpParams | None = None) -> Node:
    if est.variant == "standard":
        return loss_standard(net, sample)
    if est.variant == "deterministic":
        return loss_deterministic(net, sample)
    if est.variant == "double_sampling":
        return loss_double_sampling(net, sample)
    if target is None:
        raise ConfigurationError("the delayed-target loss needs target parameters")
    return loss_delayed_target(net, sample, target, est.lam)


def value_and_grad(loss_fn: Callable[[TapedNet], Node], params: nn.MlpParams) -> tuple[float, np.ndarray]:
    net = TapedNet.of(params)
    out = loss_fn(net)
    return float(out.value), backward(net.tape, out, net.nodes)


# -- diagnostics -------------------------------------------------------------

def excess_variance_estimate(params: nn.MlpParams, problem, volumes, sampler: Sampler, n_main: int, n_target: int, n_draws: int, rng, scale_m=None) -> float:
    """Mean over volumes of the sample variance of independent residual realisations.

    For a main side that is fixed given the volume this is V[g] / N; with a
    random main point it also includes the main side's sampling variance,
    which the squared loss picks up in exactly the same way.
    """
    if n_draws < 2:
        raise ValueError("need at least two draws per volume")
    n_vol = len(volumes[0])
    sample = assemble(problem, tile_volumes(volumes, n_draws), sampler, n_main, n_target, rng, scale_m)
    r = residual_values(params, sample).reshape(n_draws, n_vol)
    return float(np.mean(np.var(r, axis=0, ddof=1)))


# -- training ----------------------------------------------------------------

@dataclass
class MetricRecord:
    epoch: int
    train_loss: float
    excess_variance: float
    eval_mse: float
    diverged: bool
    wall_ms: int = 0
    seed: int = 0


@dataclass
class TrainSettings:
    eval_every: int = 100
    excess_volumes: int = 32
    excess_draws: int = 16
    ic_points: int = 100
    drift_limit: float = 1.0
    precision: str = "float32"  # tape dtype for the training passes
    report: str = "target"  # delayed target: evaluate and checkpoint the averaged "target" or the "main" network

    def __post_init__(self):
        if self.report not in ("target", "main"):
            raise ValueError(f"report must be 'target' or 'main', got {self.report!r}")


@dataclass
class TrainResult:
    records: list[MetricRecord]
    params: nn.MlpParams
    target: nn.MlpParams | None
    diverged: bool = False
    reason: str = ""
    volume_log: list = field(default_factory=list)
    drift_log: list = field(default_factory=list)  # (epoch, main-target drift)
    main: nn.MlpParams | None = None  # delayed target: the main network when ``params`` is the target


class VolumeStream:
    """Training volumes drawn in fixed-size blocks and handed out in order.

    The sequence of volumes depends only on the generator, not on how many
    volumes each epoch consumes, so estimators with different batch sizes
    see the same volumes in the same order.
    """

    def __init__(self, problem, rng, block: int = 4096):
        self.problem = problem
        self.rng = rng
        self.block = block
        self._buf = None
        self._pos = 0

    def take(self, n: int):
        parts = []
        while n > 0:
            if self._buf is None or self._pos == len(self._buf[0]):
                self._buf = tuple(np.asarray(a) for a in self.problem.sample_volumes(self.block, self.rng))
                self._pos = 0
            k = min(n, len(self._buf[0]) - self._pos)
            parts.append(tuple(a[self._pos : self._pos + k] for a in self._buf))
            self._pos += k
            n -= k
        if len(parts) == 1:
            return parts[0]
        return tuple(np.concatenate(cols) for cols in zip(*parts))


def drift_warmup(tau: float) -> float:
    """Epochs before the drift check starts: three averaging windows, while the target still carries its initialisation."""
    return math.inf if tau >= 1.0 else round(3.0 / (1.0 - tau), 9)


def _drift(main: nn.MlpParams, target: nn.MlpParams, pts: np.ndarray) -> float:
    """Normalized MSE between main and target outputs, averaged over output components.

    Scale-free on purpose: with a large M the main network transiently
    overshoots the target by a large factor while keeping its shape, which
    is not divergence.  0 means identical shapes, 2 uncorrelated.
    """
    a, b = nn.forward(main, pts), nn.forward(target, pts)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return float("inf")
    try:
        return float(np.mean([normalized_mse(a[:, k], b[:, k]) for k in range(a.shape[1])]))
    except DegenerateOutput:
        return float("inf")


def train(
    problem,
    net_config: nn.MlpConfig,
    est: EstimatorConfig,
    seed: int,
    evaluator: Callable[[nn.MlpParams], float] | None = None,
    settings: TrainSettings = TrainSettings(),
    drift_points: np.ndarray | None = None,
    log_volumes: int = 10,
) -> TrainResult:
    """Run one seed.

    Initialisation, volume sequence, surface points, evaluation randomness and
    the excess-variance probe each draw from their own stream of ``seed``, so
    runs with different estimators share the init and the volume sequence.
    A record is emitted at epoch 0 and every ``eval_every`` epochs; its
    ``train_loss`` is the mean estimator loss since the previous record.
    Delayed-target runs report the network chosen by ``settings.report``.
    """
    if net_config.input_dim != problem.input_dim:
        raise ConfigurationError(f"network input_dim {net_config.input_dim} != problem input dimension {problem.input_dim}")
    sampler = Sampler(SamplerKind(est.sampler), seed=seed)
    params = nn.init(net_config, stream(seed, "init"))
    pair = nn.TargetPair.from_params(params, est.tau) if est.variant == "delayed_target" else None
    adam = nn.AdamState(net_config.n_params, lr=est.lr)
    volumes = VolumeStream(problem, stream(seed, "volumes"))
    rng_pts = stream(seed, "points")
    rng_ic = stream(seed, "ic")
    excess_vols = problem.sample_volumes(settings.excess_volumes, stream(seed, "eval-volumes"))
    n_vol = est.volumes_per_epoch(problem)
    smol = isinstance(problem, SmolProblem)

    records: list[MetricRecord] = []
    volume_log: list = []
    drift_log: list = []
    losses: list[float] = []
    t0 = time.perf_counter()

    def reported():
        if pair is None:
            return params
        return pair.target if settings.report == "target" else pair.main

    def emit(epoch, diverged):
        current = reported()
        ev = evaluator(current) if evaluator is not None else float("nan")
        ex = excess_variance_estimate(
            current, problem, excess_vols, sampler, est.n_main, est.n_target, settings.excess_draws, stream(seed, f"excess-{epoch}"), est.scale_m
        )
        loss = float(np.mean(losses)) if losses else float("nan")
        records.append(MetricRecord(epoch, loss, ex, ev, diverged, int(1000 * (time.perf_counter() - t0)), seed))
        losses.clear()

    emit(0, False)
    reason = ""
    for epoch in range(1, est.epochs + 1):
        vols = volumes.take(n_vol)
        if len(volume_log) < log_volumes:
            volume_log.extend(np.column_stack([np.asarray(v).reshape(n_vol, -1) for v in vols])[: log_volumes - len(volume_log)])
        sample = assemble(problem, vols, sampler, est.n_main, est.draws, rng_pts, est.scale_m)
        current = pair.main if pair is not None else params
        net = TapedNet.of(current, Tape(settings.precision))
        loss = estimator_loss(net, sample, est, pair.target if pair is not None else None)
        if smol:
            pts, target_ic = ic_points(problem, settings.ic_points, rng_ic)
            loss = net.tape.add(loss, tape_initial_condition_loss(net.tape, net.config, net.nodes, problem, pts, target_ic))
        value = float(loss.value)
        losses.append(value)
        if not np.isfinite(value) or value > DIVERGENCE_LOSS:
            reason = f"loss {value:.3g} at epoch {epoch}"
            break
        grad = backward(net.tape, loss, net.nodes)
        try:
            new = nn.adam_step(adam, current, grad)
        except nn.NonFiniteGradient as exc:
            reason = str(exc)
            break
        if pair is not None:
            pair = nn.polyak_update(nn.TargetPair(new, pair.target, pair.tau))
            if drift_points is not None and epoch % settings.eval_every == 0 and epoch >= drift_warmup(est.tau):
                gap = _drift(pair.main, pair.target, drift_points)
                drift_log.append((epoch, gap))
                if not np.isfinite(gap) or gap > settings.drift_limit:
                    reason = f"main-target drift {gap:.3g} at epoch {epoch}"
                    break
        else:
            params = new
        if epoch % settings.eval_every == 0 or epoch == est.epochs:
            emit(epoch, False)
    if reason:
        emit(epoch, True)
    return TrainResult(
        records, reported(), pair.target if pair is not None else None, bool(reason), reason, volume_log, drift_log, pair.main if pair is not None else None
    )


def drift_points(problem, profile, seed: int, n_fallback: int = 2000) -> np.ndarray:
    """Points the main-target drift monitor compares the two networks on.

    The evaluation points where the profile has them, otherwise random
    collocation points; both come from the seed's evaluation stream.
    """
    pts = eval_points(problem, profile, stream(seed, "eval"))
    if pts is not None:
        return pts
    vols = problem.sample_volumes(n_fallback, stream(seed, "eval"))
    return np.column_stack([np.asarray(v).reshape(n_fallback, -1) for v in vols])
