"""Comparison against ground truth, with per-problem normalisation rules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import nn
from .geometry import plane_basis, sample_training_balls, sample_training_disks
from .problems.maxwell import MaxwellProblem, maxwell_analytic
from .problems.poisson import PoissonProblem, poisson_analytic
from .problems.smoluchowski import GroundTruthGrid, grid_values


class DegenerateOutput(ValueError):
    pass


@dataclass(frozen=True)
class PoissonRobustGrid:
    """Radial-quantile by random-direction grid for rotation-invariant problems."""

    q: int = 100
    s: int = 100
    t: int = 1000


@dataclass(frozen=True)
class PoissonGrid:
    """Cell centres of a regular grid over [-1, 1]^d (heatmap-style)."""

    n: int = 64


@dataclass(frozen=True)
class MaxwellIid:
    n: int = 2000
    mean_subtract_only: bool = True


@dataclass(frozen=True)
class SmolGrid:
    stride_x: int = 8
    stride_t: int = 16


def _check_positive(profile):
    for k, v in vars(profile).items():
        if isinstance(v, int) and not isinstance(v, bool) and v < 1:
            raise ValueError(f"{type(profile).__name__}.{k} must be >= 1")


def normalize(v: np.ndarray) -> np.ndarray:
    """Zero mean, unit (population) variance."""
    v = np.asarray(v, dtype=np.float64)
    c = v - v.mean()
    sd = np.sqrt(np.mean(c * c))
    if not np.isfinite(sd) or sd == 0.0:
        raise DegenerateOutput("output has zero or non-finite variance on the evaluation grid")
    return c / sd


def normalized_mse(pred, truth) -> float:
    d = normalize(pred) - normalize(truth)
    return float(np.mean(d * d))


def centered_mse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    d = (pred - pred.mean(axis=0)) - (truth - truth.mean(axis=0))
    return float(np.mean(d * d))


# -- Poisson -------------------------------------------------------------------

def robust_grid(problem: PoissonProblem, profile: PoissonRobustGrid, rng) -> np.ndarray:
    """q mid-quantile radii of training-volume points times s random unit directions."""
    _check_positive(profile)
    centers, radii = sample_training_balls(problem.volume_profile, profile.t, problem.dim, rng)
    z = rng.standard_normal((profile.t, problem.dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    inner = rng.random(profile.t) ** (1.0 / problem.dim)
    pts = centers + (radii * inner)[:, None] * z
    origin = problem.positions.mean(axis=0)
    r = np.linalg.norm(pts - origin, axis=1)
    radii_q = np.quantile(r, (np.arange(profile.q) + 0.5) / profile.q)
    dirs = rng.standard_normal((profile.s, problem.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origin + (radii_q[:, None, None] * dirs[None, :, :]).reshape(-1, problem.dim)


def regular_grid(dim: int, n: int) -> np.ndarray:
    c = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    mesh = np.meshgrid(*[c] * dim, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def robust_poisson_eval(params: nn.MlpParams, problem: PoissonProblem, profile: PoissonRobustGrid, rng) -> float:
    pts = robust_grid(problem, profile, rng)
    u, _ = poisson_analytic(problem.dim, problem.positions, problem.charges, pts)
    return normalized_mse(nn.forward(params, pts)[:, 0], u)


# -- Maxwell -------------------------------------------------------------------

def maxwell_points(n: int, rng) -> np.ndarray:
    """Points uniform over random training disks."""
    c, nrm, r = sample_training_disks(n, rng)
    e1, e2 = plane_basis(nrm)
    rho = r * np.sqrt(rng.random(n))
    phi = 2.0 * np.pi * rng.random(n)
    return c + (rho * np.cos(phi))[:, None] * e1 + (rho * np.sin(phi))[:, None] * e2


def maxwell_eval(params: nn.MlpParams, problem: MaxwellProblem, profile: MaxwellIid, rng) -> float:
    _check_positive(profile)
    if profile.n < 2:
        raise ValueError("need at least two evaluation points")
    pts = maxwell_points(profile.n, rng)
    a, _ = maxwell_analytic(problem, pts)
    pred = nn.forward(params, pts)
    if profile.mean_subtract_only:
        return centered_mse(pred, a)
    return float(np.mean([normalized_mse(pred[:, k], a[:, k]) for k in range(3)]))


def maxwell_curl_eval(params: nn.MlpParams, problem: MaxwellProblem, pts: np.ndarray) -> float:
    """Secondary metric: mean-subtracted MSE of curl A against B."""
    _, b = maxwell_analytic(problem, pts)
    jac = [nn.eval_with_tangent(params, pts, e).tangent for e in np.eye(3)]  # jac[k][:, i] = dA_i/dx_k
    curl = np.stack([jac[1][:, 2] - jac[2][:, 1], jac[2][:, 0] - jac[0][:, 2], jac[0][:, 1] - jac[1][:, 0]], axis=1)
    return centered_mse(curl, b)


# -- Smoluchowski -------------------------------------------------------------

def smol_eval(params: nn.MlpParams, grid: GroundTruthGrid, profile: SmolGrid = SmolGrid()) -> float:
    pred, truth = grid_values(params, grid, profile.stride_x, profile.stride_t)
    d = pred - truth
    return float(np.mean(d * d))


# -- evaluator factory -------------------------------------------------------

def make_evaluator(problem, profile, rng, grid: GroundTruthGrid | None = None) -> Callable[[nn.MlpParams], float]:
    """Bind the evaluation randomness once; the result is a pure function of the parameters."""
    _check_positive(profile)
    if isinstance(profile, PoissonRobustGrid):
        pts = robust_grid(problem, profile, rng)
    elif isinstance(profile, PoissonGrid):
        pts = regular_grid(problem.dim, profile.n)
    elif isinstance(profile, MaxwellIid):
        pts = maxwell_points(profile.n, rng)
        a, _ = maxwell_analytic(problem, pts)
        if profile.mean_subtract_only:
            return lambda p: centered_mse(nn.forward(p, pts), a)
        return lambda p: float(np.mean([normalized_mse(nn.forward(p, pts)[:, k], a[:, k]) for k in range(3)]))
    elif isinstance(profile, SmolGrid):
        if grid is None:
            raise ValueError("the coagulation evaluation needs a ground-truth grid")
        return lambda p: smol_eval(p, grid, profile)
    else:
        raise TypeError(f"unknown evaluation profile {type(profile).__name__}")
    u, _ = poisson_analytic(problem.dim, problem.positions, problem.charges, pts)
    return lambda p: normalized_mse(nn.forward(p, pts)[:, 0], u)


def eval_points(problem, profile, rng) -> np.ndarray | None:
    """The points an evaluator uses, for drift monitoring; None for grid-based profiles."""
    if isinstance(profile, PoissonRobustGrid):
        return robust_grid(problem, profile, rng)
    if isinstance(profile, PoissonGrid):
        return regular_grid(problem.dim, profile.n)
    if isinstance(profile, MaxwellIid):
        return maxwell_points(profile.n, rng)
    return None


def best_epoch(records: Sequence):
    """Record with minimal eval_mse; ties resolve to the earliest epoch."""
    if not records:
        raise ValueError("empty metric stream")
    best = records[0]
    for r in records[1:]:
        if r.eval_mse < best.eval_mse:
            best = r
    return best
