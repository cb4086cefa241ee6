"""Maxwell-Ampere problem: circulation of B = curl A around random disks equals enclosed current."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import Disk, Sampler, enclosed_current, plane_basis, sample_training_disks
from .poisson import SingularityError, default_scale_m, main_scale, split_surface
from .residual import ResidualSample, TermSet

_S = 1.0 / math.sqrt(3.0)
DEFAULT_VERTICES = (
    (_S, -_S, -_S),
    (_S, _S, _S),
    (-_S, _S, _S),
    (-_S, -_S, -_S),
)


@dataclass(frozen=True)
class MaxwellProblem:
    """A closed polygonal circuit; current flows from each vertex to the next."""

    vertices: tuple = DEFAULT_VERTICES
    current: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] < 3:
            raise ValueError("a circuit needs at least three 3-D vertices")
        if np.any(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1) == 0.0):
            raise ValueError("consecutive circuit vertices coincide")

    @property
    def segments(self) -> list[tuple[np.ndarray, np.ndarray]]:
        v = np.asarray(self.vertices, dtype=np.float64)
        return [(v[i], v[(i + 1) % len(v)]) for i in range(len(v))]

    @property
    def input_dim(self) -> int:
        return 3

    def sample_volumes(self, n: int, rng):
        return sample_training_disks(n, rng)


def _volumes(disks):
    if isinstance(disks, Disk):
        return disks.center[None, :], disks.normal[None, :], np.array([disks.radius])
    c, n, r = disks
    return (
        np.atleast_2d(np.asarray(c, dtype=np.float64)),
        np.atleast_2d(np.asarray(n, dtype=np.float64)),
        np.atleast_1d(np.asarray(r, dtype=np.float64)),
    )


def maxwell_residual(problem: MaxwellProblem, disks, sampler: Sampler, n_main: int, n_target: int, rng=None, scale_m: float | None = None) -> ResidualSample:
    """Residual terms for one disk or a batch ``(centers, normals, radii)``."""
    if n_main < 1:
        raise ValueError("need at least one main-side point (N' >= 1)")
    if n_target < 0:
        raise ValueError("target sample size must be >= 0")
    m = default_scale_m(n_main, n_target) if scale_m is None else float(scale_m)
    if m < 1.0:
        raise ValueError("Riemann-sum size M must be >= 1")
    centers, normals, radii = _volumes(disks)
    samples = sampler.circle(centers, normals, radii, n_main + n_target, rng)
    main, target = split_surface(samples, 2.0 * np.pi * radii, n_main, n_target, m, "curl")
    label = enclosed_current(centers, normals, radii, problem.segments, problem.current)
    meta = {"centers": centers, "normals": normals, "radii": radii, "sampler": sampler.kind, "main_scale": main_scale(n_main, n_target, m)}
    return ResidualSample(main, target, label, m, n_main, n_target, meta)


# -- closed form -------------------------------------------------------------------

def _log_shift(w: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """log(w + sqrt(rho^2 + w^2)) without cancellation for w < 0."""
    r = np.sqrt(rho * rho + w * w)
    with np.errstate(divide="ignore"):
        return np.where(w >= 0, np.log(w + r), 2.0 * np.log(rho) - np.log(r - w))


def template_segment_field(x, z1: float, z2: float, current: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (A, B) of a straight wire on the z-axis between z1 and z2.

    The formula below corresponds to current ``current`` flowing from z2
    towards z1 (the -z direction when z1 < z2).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rho = np.hypot(x[:, 0], x[:, 1])
    w1, w2 = z1 - x[:, 2], z2 - x[:, 2]
    r1 = np.sqrt(rho * rho + w1 * w1)
    r2 = np.sqrt(rho * rho + w2 * w2)
    lo, hi = min(z1, z2), max(z1, z2)
    if np.any((rho == 0.0) & (x[:, 2] >= lo) & (x[:, 2] <= hi)):
        raise SingularityError("evaluation point lies on a wire")
    both_below = (w1 < 0) & (w2 < 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(both_below, np.log((r1 - w1) / (r2 - w2)), _log_shift(w2, rho) - _log_shift(w1, rho))
        bracket = w2 / r2 - w1 / r1
        b_mag = np.where(rho > 0, -current / (4.0 * np.pi * rho) * bracket, 0.0)
        phi_hat = np.stack([-x[:, 1], x[:, 0], np.zeros_like(rho)], axis=1) / np.where(rho > 0, rho, 1.0)[:, None]
    a = np.zeros_like(x)
    a[:, 2] = -current / (4.0 * np.pi) * log_ratio
    return a, b_mag[:, None] * phi_hat


def segment_field(x, a, b, current: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """(A, B) of a straight wire from ``a`` to ``b`` carrying ``current`` towards ``b``.

    The template is placed with its z-axis along a - b, ``a`` at z2 = 0 and
    ``b`` at z1 = -|b - a|, in a right-handed frame.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    length = float(np.linalg.norm(b - a))
    if length == 0.0:
        raise ValueError("zero-length wire segment")
    ez = (a - b) / length
    e1, e2 = plane_basis(ez[None, :])
    frame = np.stack([e1[0], e2[0], ez])  # rows: local axes in world coordinates
    local = (np.atleast_2d(np.asarray(x, dtype=np.float64)) - a) @ frame.T
    a_loc, b_loc = template_segment_field(local, -length, 0.0, current)
    return a_loc @ frame, b_loc @ frame


def maxwell_analytic(problem: MaxwellProblem, x) -> tuple[np.ndarray, np.ndarray]:
    """Vector potential A and field B = curl A of the circuit at ``x`` ((3,) or (n, 3))."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    a_tot = np.zeros_like(pts)
    b_tot = np.zeros_like(pts)
    for a, b in problem.segments:
        a_s, b_s = segment_field(pts, a, b, problem.current)
        a_tot += a_s
        b_tot += b_s
    if single:
        return a_tot[0], b_tot[0]
    return a_tot, b_tot


def analytic_circulation_quantity(problem: MaxwellProblem, terms: TermSet) -> np.ndarray:
    """B . t at each term, for checks that substitute the exact field."""
    _, b = maxwell_analytic(problem, terms.points)
    return np.sum(b * terms.directions, axis=1)
