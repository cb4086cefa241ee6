"""Smoluchowski coagulation: dn/dt equals a gain integral minus a loss integral.

Particle sizes live in [0, 1]^m (m = ``size_dim``); the network input is
(size..., time).  For m > 1 the kernel is applied to the L1 norms of the sizes
and the gain integral runs over the box [0, x].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import nn
from ..autodiff import Node, Tape
from .residual import ResidualSample, TermSet


def constant_density(x: np.ndarray) -> np.ndarray:
    return np.ones(np.asarray(x).shape[0])


@dataclass(frozen=True)
class SmolProblem:
    size_dim: int = 1
    kernel_scale: float = 1.23
    kernel_cap: float = 1.14
    kernel_power: float = 3.0
    gain_factor: float = 1.0  # 0.5 gives the conventional symmetric form
    ic_weight: float = 1.0
    n0: Callable[[np.ndarray], np.ndarray] = field(default=constant_density, compare=False)

    def __post_init__(self):
        if self.size_dim < 1:
            raise ValueError("size_dim must be >= 1")
        if self.kernel_scale < 0 or self.kernel_cap < 0:
            raise ValueError("kernel constants must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.size_dim + 1

    def kernel(self, x, xp) -> np.ndarray:
        return smol_kernel(x, xp, self.kernel_scale, self.kernel_cap, self.kernel_power)

    def sample_volumes(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Collocation sizes in (0, 1]^m and times in [0, 1]."""
        x = 1.0 - rng.random((n, self.size_dim))
        t = rng.random(n)
        return x, t


def smol_kernel(x, xp, scale: float = 1.23, cap: float = 1.14, power: float = 3.0) -> np.ndarray:
    """scale * min(cap, sqrt|x| + sqrt|x'|)^power, with |.| the L1 norm for vector sizes."""
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    return scale * np.minimum(cap, np.sqrt(x) + np.sqrt(xp)) ** power


def _size_norm(x: np.ndarray) -> np.ndarray:
    return np.sum(x, axis=-1)


def smol_residual(problem: SmolProblem, x, t, n_main_unused: int, n_target: int, rng) -> ResidualSample:
    """Residual terms at collocation points ``x`` ((V,) or (V, m)) and times ``t`` (V,).

    The main side is dn/dt (coefficient 1).  Each of the ``n_target`` draws
    contributes one gain term with coefficient prod(x)/N, evaluated at
    (x - s, s) with s ~ U[0, x], and one loss term with coefficient -1/N,
    evaluated at (x, s') with s' ~ U[0, 1]^m.  The kernel value sits in the
    term weight.
    """
    if n_target < 1:
        raise ValueError("need at least one target draw")
    m = problem.size_dim
    x = np.asarray(x, dtype=np.float64).reshape(-1, m)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    v = x.shape[0]
    if t.shape != (v,):
        raise ValueError("one time per collocation size is required")
    if np.any(x < 0) or np.any(x > 1) or np.any(t < 0) or np.any(t > 1):
        raise ValueError("sizes must lie in [0, 1]^m and times in [0, 1]")
    xt = np.column_stack([x, t])
    main = TermSet(
        "directional",
        xt,
        np.ones(v),
        np.arange(v),
        np.zeros(v, dtype=np.int64),
        np.tile(np.r_[np.zeros(m), 1.0], (v, 1)),
    )
    n = n_target
    s = rng.random((v, n, m)) * x[:, None, :]
    sp = rng.random((v, n, m))
    tt = np.broadcast_to(t[:, None, None], (v, n, 1))
    xb = np.broadcast_to(x[:, None, :], (v, n, m))
    gain_pts = np.stack([np.concatenate([xb - s, tt], -1), np.concatenate([s, tt], -1)], axis=2)
    loss_pts = np.stack([np.concatenate([xb, tt], -1), np.concatenate([sp, tt], -1)], axis=2)
    a1 = np.prod(x, axis=1)
    gain_coef = np.broadcast_to((problem.gain_factor * a1 / n)[:, None], (v, n))
    loss_coef = np.full((v, n), -1.0 / n)
    gain_w = problem.kernel(_size_norm(xb - s), _size_norm(s))
    loss_w = problem.kernel(_size_norm(xb), _size_norm(sp))
    vol = np.broadcast_to(np.arange(v)[:, None], (v, n))
    draw = np.broadcast_to(np.arange(n)[None, :], (v, n))
    target = TermSet(
        "product",
        np.concatenate([gain_pts.reshape(-1, 2, m + 1), loss_pts.reshape(-1, 2, m + 1)]),
        np.concatenate([gain_coef.reshape(-1), loss_coef.reshape(-1)]),
        np.concatenate([vol.reshape(-1), vol.reshape(-1)]),
        np.concatenate([draw.reshape(-1), draw.reshape(-1)]),
        weight=np.concatenate([gain_w.reshape(-1), loss_w.reshape(-1)]),
    )
    return ResidualSample(main, target, np.zeros(v), 1.0, 1, n, {"x": x, "t": t})


def ic_points(problem: SmolProblem, n_points: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if n_points < 1:
        raise ValueError("need at least one initial-condition point")
    x = rng.random((n_points, problem.size_dim))
    return np.column_stack([x, np.zeros(n_points)]), problem.n0(x)


def initial_condition_loss(params: nn.MlpParams, problem: SmolProblem, n_points: int, rng) -> float:
    pts, target = ic_points(problem, n_points, rng)
    diff = nn.forward(params, pts)[:, 0] - target
    return problem.ic_weight * float(np.mean(diff * diff))


def tape_initial_condition_loss(tape: Tape, config: nn.MlpConfig, nodes: list[Node], problem: SmolProblem, pts, target) -> Node:
    out = tape.column(nn.apply(tape, config, nodes, tape.constant(pts)), 0)
    return tape.scale(tape.mean(tape.square(tape.sub(out, tape.constant(target)))), problem.ic_weight)


# -- ground truth ----------------------------------------------------------------

class IntegrationUnstable(FloatingPointError):
    pass


@dataclass
class GroundTruthGrid:
    x: np.ndarray  # (n_x,) per-axis size grid
    t: np.ndarray  # (n_t,)
    density: np.ndarray  # (n_t, n_x ** m)
    size_dim: int = 1

    def points(self) -> np.ndarray:
        """Size grid points, (n_x ** m, m), C order."""
        axes = np.meshgrid(*([self.x] * self.size_dim), indexing="ij")
        return np.stack([a.reshape(-1) for a in axes], axis=1)

    def save(self, path) -> None:
        np.savez(Path(path), x=self.x, t=self.t, density=self.density, size_dim=self.size_dim)

    @classmethod
    def load(cls, path) -> "GroundTruthGrid":
        with np.load(Path(path)) as z:
            return cls(z["x"], z["t"], z["density"], int(z["size_dim"]))

    def save_csv(self, path) -> None:
        """Long-format table: t, x_1..x_m, n."""
        pts = self.points()
        rows = [
            np.column_stack([np.full(pts.shape[0], tk), pts, self.density[k]])
            for k, tk in enumerate(self.t)
        ]
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(self.size_dim)] + ["n"])
        np.savetxt(path, np.concatenate(rows), delimiter=",", header=header, comments="", fmt="%.17g")


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _pair_table(problem: SmolProblem, grid: np.ndarray):
    """Index pairs and weights for the gain sums on a uniform grid from 0.

    For output node i and inner node j <= i (componentwise) the gain
    integrand sits at (i - j, j); its trapezoid weight is the product over
    axes of the 1-D weights on [0, x_i].
    """
    m = problem.size_dim
    n = grid.size
    h = grid[1] - grid[0]
    idx_i, idx_j, w_ij = [], [], []
    for i in range(n):
        if i == 0:
            continue
        w = _trapezoid_weights(i + 1, h)
        idx_i.append(np.full(i + 1, i))
        idx_j.append(np.arange(i + 1))
        w_ij.append(w)
    ii = np.concatenate(idx_i)
    jj = np.concatenate(idx_j)
    ww = np.concatenate(w_ij)
    if m == 1:
        return ii, jj, ii - jj, ww
    # tensor product of the 1-D tables, including zero-width axes (weight 0)
    shape = (n,) * m
    per_axis = [(ii, jj, ww)] * m
    grids = np.meshgrid(*[np.arange(ii.size)] * m, indexing="ij")
    flat = [g.reshape(-1) for g in grids]
    out_i = np.ravel_multi_index(tuple(per_axis[a][0][flat[a]] for a in range(m)), shape)
    in_j = np.ravel_multi_index(tuple(per_axis[a][1][flat[a]] for a in range(m)), shape)
    diff = np.ravel_multi_index(tuple(per_axis[a][0][flat[a]] - per_axis[a][1][flat[a]] for a in range(m)), shape)
    w = np.prod([per_axis[a][2][flat[a]] for a in range(m)], axis=0)
    return out_i, in_j, diff, w


def smol_ground_truth(problem: SmolProblem, n_x: int, n_t: int, blowup: float = 1e6) -> GroundTruthGrid:
    """Forward-Euler reference solution on a uniform (size, time) grid over [0, 1]^2.

    Time derivatives use full trapezoid sums of the gain and loss integrals on
    the size grid.  For m > 1 the grid is the tensor product of ``n_x`` points
    per axis; only modest ``n_x`` is practical there.
    """
    if n_x < 2 or n_t < 2:
        raise ValueError("ground-truth grids need at least two points per axis")
    m = problem.size_dim
    x = np.linspace(0.0, 1.0, n_x)
    t = np.linspace(0.0, 1.0, n_t)
    dt = t[1] - t[0]
    gt = GroundTruthGrid(x, t, np.empty((n_t, n_x**m)), m)
    pts = gt.points()
    norms = _size_norm(pts)
    out_i, in_j, diff, w = _pair_table(problem, x)
    gain_w = problem.gain_factor * w * problem.kernel(norms[diff], norms[in_j])
    loss_w = np.prod(np.meshgrid(*[_trapezoid_weights(n_x, x[1] - x[0])] * m, indexing="ij"), axis=0).reshape(-1)
    loss_k = problem.kernel(norms[:, None], norms[None, :]) * loss_w[None, :]
    n = np.asarray(problem.n0(pts), dtype=np.float64).copy()
    gt.density[0] = n
    for k in range(1, n_t):
        gain = np.bincount(out_i, weights=gain_w * n[diff] * n[in_j], minlength=n.size)
        loss = n * (loss_k @ n)
        n = n + dt * (gain - loss)
        if not np.all(np.isfinite(n)) or np.max(np.abs(n)) > blowup:
            raise IntegrationUnstable(f"forward Euler blew up at step {k} (t = {t[k]:.4g}); reduce the time step (n_t = {n_t})")
        gt.density[k] = n
    return gt


def grid_values(params: nn.MlpParams, grid: GroundTruthGrid, stride_x: int = 1, stride_t: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Network and reference densities on a strided sub-grid, both flattened."""
    pts = grid.points()
    sel = np.arange(0, grid.x.size, stride_x)
    if grid.size_dim > 1:
        mesh = np.meshgrid(*[sel] * grid.size_dim, indexing="ij")
        sel = np.ravel_multi_index(tuple(a.reshape(-1) for a in mesh), (grid.x.size,) * grid.size_dim)
    tk = np.arange(0, grid.t.size, stride_t)
    p = pts[sel]
    xt = np.concatenate([np.column_stack([p, np.full(p.shape[0], grid.t[k])]) for k in tk])
    return nn.forward(params, xt)[:, 0], grid.density[np.ix_(tk, sel)].reshape(-1)
