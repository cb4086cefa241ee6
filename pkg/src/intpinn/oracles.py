"""Closed-form oracle checks: flux and circulation identities for the analytic fields.

Surface integrands of point sources are singular near the source, so i.i.d.
estimates over volumes whose boundary grazes a source have heavy tails.  The
oracle volumes below keep every source a fixed relative distance from the
boundary.  For a unit charge at relative offset rho = |p - c| / r inside a
ball in R^d, the normalised flux density has second moment
(1 + rho^2) / (1 - rho^2)^(d - 1); ``separation_ratio`` picks the largest rho
that keeps it below ``moment_bound``.  A straight wire crossing a disk at
relative offset rho gives the d = 2 density, so disks keep their boundary at
least (1 - rho_max(2)) r from every wire.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .geometry import Sampler, sample_training_disks
from .problems.maxwell import MaxwellProblem, analytic_circulation_quantity, maxwell_residual
from .problems.poisson import PoissonProblem, analytic_flux_quantity, poisson_residual

DEFAULT_MOMENT_BOUND = 1.8


def separation_ratio(d: int, moment_bound: float = DEFAULT_MOMENT_BOUND) -> float:
    if d == 1:
        return 0.9
    return brentq(lambda r: (1 + r * r) / (1 - r * r) ** (d - 1) - moment_bound, 0.0, 0.999999)


def separated_balls(dim: int, n: int, rng, inside: bool, moment_bound: float = DEFAULT_MOMENT_BOUND):
    """Balls around a unit charge at the origin with the charge well inside or well outside."""
    rho_max = separation_ratio(dim, moment_bound)
    radii = rng.uniform(0.1, 1.5, n)
    rho = rng.uniform(0.0, rho_max, n) if inside else rng.uniform(1.0 / rho_max, 2.0 / rho_max, n)
    u = rng.standard_normal((n, dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return -(rho * radii)[:, None] * u, radii


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    s = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + s[..., None] * ab), axis=-1)


def separated_disks(problem: MaxwellProblem, n: int, rng, clearance: float | None = None, n_probe: int = 512):
    """Training-distribution disks whose boundary circle stays clearance * r from every wire."""
    if clearance is None:
        clearance = 1.0 - separation_ratio(2)
    out_c, out_n, out_r = [], [], []
    while len(out_r) < n:
        c, nrm, r = sample_training_disks(4 * n, rng)
        pts = Sampler("lattice", rotation="none").circle(c, nrm, r, n_probe, rng).points
        dist = np.min([_segment_distance(pts, a, b) for a, b in problem.segments], axis=0).min(axis=1)
        keep = dist >= clearance * r
        out_c.extend(c[keep])
        out_n.extend(nrm[keep])
        out_r.extend(r[keep])
    return np.array(out_c[:n]), np.array(out_n[:n]), np.array(out_r[:n])


@dataclass
class IdentityCheck:
    name: str
    errors: np.ndarray  # |integral - source| per volume
    labels: np.ndarray
    tolerance: float

    @property
    def max_error(self) -> float:
        return float(np.max(np.abs(self.errors)))

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _integral(sample, q_main, q_target) -> np.ndarray:
    n = sample.n_volumes
    f = np.bincount(sample.main.volume, weights=sample.main.factor * q_main, minlength=n)
    g = np.bincount(sample.target.volume, weights=sample.target.factor * q_target, minlength=n)
    return f - g


def flux_identity(dim: int, n_volumes: int, n_points: int, rng, inside: bool, tolerance: float = 0.01, chunk: int = 2_000_000) -> IdentityCheck:
    """Analytic-field flux through separated balls versus enclosed charge (unit charge)."""
    problem = PoissonProblem(dim, ((0.0,) * dim,), (1.0,), "unit_ball_volume")
    centers, radii = separated_balls(dim, n_volumes, rng, inside)
    per = max(1, chunk // (n_points * dim))
    errs, labels = [], []
    for i in range(0, n_volumes, per):
        s = poisson_residual(problem, (centers[i : i + per], radii[i : i + per]), Sampler("iid_gaussian"), 1, n_points - 1, rng)
        val = _integral(s, analytic_flux_quantity(problem, s.main), analytic_flux_quantity(problem, s.target))
        errs.append(val - s.label)
        labels.append(s.label)
    return IdentityCheck(f"flux d={dim} {'inside' if inside else 'outside'}", np.concatenate(errs), np.concatenate(labels), tolerance)


def circulation_identity(problem: MaxwellProblem, n_volumes: int, n_points: int, rng, tolerance: float = 0.01, chunk: int = 1_000_000) -> IdentityCheck:
    """Analytic-field circulation around separated disks versus enclosed current."""
    c, nrm, r = separated_disks(problem, n_volumes, rng)
    per = max(1, chunk // n_points)
    errs, labels = [], []
    for i in range(0, n_volumes, per):
        sl = slice(i, i + per)
        s = maxwell_residual(problem, (c[sl], nrm[sl], r[sl]), Sampler("iid_gaussian"), 1, n_points - 1, rng)
        val = _integral(s, analytic_circulation_quantity(problem, s.main), analytic_circulation_quantity(problem, s.target))
        errs.append(val - s.label)
        labels.append(s.label)
    tol = tolerance * abs(problem.current)
    return IdentityCheck("circulation", np.concatenate(errs), np.concatenate(labels), tol)
