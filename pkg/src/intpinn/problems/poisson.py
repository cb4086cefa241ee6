"""Poisson problem: flux of E = grad U through random spheres equals enclosed charge."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import Ball, Sampler, enclosed_charge, sample_training_balls, surface_area
from .residual import ResidualSample, TermSet

DEFAULT_CHARGES = ((0.0, 0.0), (-0.5, -0.5), (0.5, 0.5))


class SingularityError(ValueError):
    pass


@dataclass(frozen=True)
class PoissonProblem:
    dim: int = 2
    charge_positions: tuple = DEFAULT_CHARGES
    charge_values: tuple = (1.0, 1.0, 1.0)
    volume_profile: str = "box"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        pos = np.asarray(self.charge_positions, dtype=np.float64).reshape(-1, self.dim)
        q = np.asarray(self.charge_values, dtype=np.float64).reshape(-1)
        if pos.shape[0] != q.shape[0]:
            raise ValueError("one magnitude per charge is required")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(q))):
            raise ValueError("charges must be finite")

    @property
    def positions(self) -> np.ndarray:
        return np.asarray(self.charge_positions, dtype=np.float64).reshape(-1, self.dim)

    @property
    def charges(self) -> np.ndarray:
        return np.asarray(self.charge_values, dtype=np.float64).reshape(-1)

    @property
    def input_dim(self) -> int:
        return self.dim

    def sample_volumes(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        return sample_training_balls(self.volume_profile, n, self.dim, rng)


def centered_charge(dim: int) -> PoissonProblem:
    """A single unit charge at the origin, the rotation-invariant setting."""
    return PoissonProblem(dim, ((0.0,) * dim,), (1.0,), "unit_ball_volume")


def default_scale_m(n_main: int, n_target: int) -> float:
    """Riemann-sum size that splits the surface evenly over all N' + N points."""
    return (n_main + n_target) / n_main


def main_scale(n_main: int, n_target: int, scale_m: float) -> float:
    """Main coefficient relative to its value at the default M."""
    return default_scale_m(n_main, n_target) / scale_m


def _volumes(balls):
    if isinstance(balls, Ball):
        return balls.center[None, :], np.array([balls.radius])
    centers, radii = balls
    return np.atleast_2d(np.asarray(centers, dtype=np.float64)), np.atleast_1d(np.asarray(radii, dtype=np.float64))


def split_surface(samples, area, n_main, n_target, scale_m, kind):
    """Turn N' + N boundary samples per volume into main and target term sets.

    Main coefficients are A w (N'+N) / (M N') and target coefficients
    -A w (N'+N)(M-1) / (M N), with w the per-point quadrature weight.  With
    uniform weights this is A/(M N') and -A(M-1)/(M N).
    """
    n_vol, n_tot, dim = samples.points.shape
    scale = area[:, None] * samples.weights * n_tot
    vol = np.broadcast_to(np.arange(n_vol)[:, None], (n_vol, n_tot))
    draw = np.broadcast_to(np.arange(n_tot)[None, :], (n_vol, n_tot))
    coef = np.empty((n_vol, n_tot))
    coef[:, :n_main] = scale[:, :n_main] / (scale_m * n_main)
    if n_target:
        coef[:, n_main:] = -scale[:, n_main:] * (scale_m - 1.0) / (scale_m * n_target)

    def pick(sl, draw_offset):
        return TermSet(
            kind,
            samples.points[:, sl].reshape(-1, dim),
            coef[:, sl].reshape(-1),
            vol[:, sl].reshape(-1),
            (draw[:, sl] - draw_offset).reshape(-1),
            samples.directions[:, sl].reshape(-1, dim),
        )

    return pick(slice(0, n_main), 0), pick(slice(n_main, n_tot), n_main)


def poisson_residual(problem: PoissonProblem, balls, sampler: Sampler, n_main: int, n_target: int, rng=None, scale_m: float | None = None) -> ResidualSample:
    """Residual terms for one ball or a batch ``(centers, radii)``."""
    if n_main < 1:
        raise ValueError("need at least one main-side point (N' >= 1)")
    if n_target < 0:
        raise ValueError("target sample size must be >= 0")
    m = default_scale_m(n_main, n_target) if scale_m is None else float(scale_m)
    if m < 1.0:
        raise ValueError("Riemann-sum size M must be >= 1")
    centers, radii = _volumes(balls)
    if centers.shape[1] != problem.dim:
        raise ValueError(f"ball dimension {centers.shape[1]} != problem dimension {problem.dim}")
    samples = sampler.sphere(centers, radii, n_main + n_target, rng)
    area = surface_area(problem.dim, radii)
    main, target = split_surface(samples, area, n_main, n_target, m, "directional")
    label = enclosed_charge(centers, radii, problem.positions, problem.charges)
    return ResidualSample(main, target, label, m, n_main, n_target, {"centers": centers, "radii": radii, "sampler": sampler.kind, "main_scale": main_scale(n_main, n_target, m)})


def _green_constants(d: int) -> tuple[float, float]:
    c_e = math.gamma(d / 2) / (2.0 * math.pi ** (d / 2))
    c_u = c_e / (2.0 - d) if d != 2 else 1.0 / (2.0 * math.pi)
    return c_u, c_e


def poisson_analytic(dim: int, positions, charges, x) -> tuple[np.ndarray, np.ndarray]:
    """Potential U and field E = grad U for point charges, by superposition.

    ``x`` may be one point (d,) or a batch (n, d).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, dim)
    charges = np.asarray(charges, dtype=np.float64).reshape(-1)
    c_u, c_e = _green_constants(dim)
    u = np.zeros(x.shape[0])
    e = np.zeros_like(x)
    for p, q in zip(positions, charges):
        diff = x - p
        r = np.linalg.norm(diff, axis=1)
        if np.any(r == 0.0):
            raise SingularityError("evaluation point coincides with a charge")
        u += q * (c_u * np.log(r) if dim == 2 else c_u * r ** (2 - dim))
        e += q * c_e * diff / r[:, None] ** dim
    if single:
        return u[0], e[0]
    return u, e


def analytic_flux_quantity(problem: PoissonProblem, terms: TermSet) -> np.ndarray:
    """E . n at each term, for checks that substitute the exact field."""
    _, e = poisson_analytic(problem.dim, problem.positions, problem.charges, terms.points)
    return np.sum(e * terms.directions, axis=1)
