"""Finite-state linear testbed for delayed-target training.

States x = 1..S carry features phi(x) (rows of Phi) and probabilities D_P.
The integral equation f = Y + P Lambda f (P row-stochastic: the conditional
law of x' given x; Lambda relates features, Psi = Lambda Phi) is solved with
f = Phi theta either by

* the standard objective   min ||Phi theta - U Phi theta||_D^2, or
* delayed targeting, whose fixed point solves Phi theta = Pi U Phi theta,
  i.e. A theta = b with A = Phi^T D (I - P Lambda) Phi and b = Phi^T D Y.

Norms ||v||_D^2 = sum_x D_P(x) v(x)^2 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

DENSE_LIMIT = 200


class RankError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AbstractLinearSystem:
    Phi: np.ndarray  # (S, d)
    D: np.ndarray  # (S,) state probabilities
    P: np.ndarray  # (S, S) row-stochastic
    Lam: np.ndarray  # (S, S)
    Y: np.ndarray  # (S,)

    def __post_init__(self):
        S, d = self.Phi.shape
        if not S >= d >= 1:
            raise ValueError("need S >= d >= 1")
        if self.D.shape != (S,) or self.P.shape != (S, S) or self.Lam.shape != (S, S) or self.Y.shape != (S,):
            raise ValueError("inconsistent system shapes")
        if np.any(self.D <= 0) or not np.isclose(self.D.sum(), 1.0):
            raise ValueError("state probabilities must be positive and sum to 1")
        if np.any(self.P < 0) or not np.allclose(self.P.sum(axis=1), 1.0):
            raise ValueError("P must be row-stochastic")

    @property
    def S(self) -> int:
        return self.Phi.shape[0]

    @property
    def d(self) -> int:
        return self.Phi.shape[1]

    @property
    def Psi(self) -> np.ndarray:
        return self.Lam @ self.Phi

    @property
    def PL(self) -> np.ndarray:
        return self.P @ self.Lam

    @property
    def A(self) -> np.ndarray:
        return self.Phi.T @ (self.D[:, None] * (self.Phi - self.P @ self.Psi))

    @property
    def b(self) -> np.ndarray:
        return self.Phi.T @ (self.D * self.Y)

    def check(self, tol: float = 1e-12) -> None:
        """Raise if any structural assumption fails."""
        if np.linalg.matrix_rank(self.Phi) != self.d or np.linalg.matrix_rank(self.Psi) != self.d:
            raise RankError("Phi and Psi must have full column rank")
        if np.max(np.linalg.norm(self.Phi, axis=1)) > 1 + tol or np.max(np.linalg.norm(self.Psi, axis=1)) > 1 + tol:
            raise ValueError("feature rows must have norm <= 1")


def d_norm(system: AbstractLinearSystem, v: np.ndarray) -> float:
    return float(np.sqrt(np.sum(system.D * v * v)))


def spectral_radius(M: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Largest absolute eigenvalue (dense for small matrices, power iteration otherwise)."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("spectral radius needs a square matrix")
    if M.shape[0] <= DENSE_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(M))))
    # power iteration on M itself; the norm ratio of successive iterates converges to the radius
    v = np.random.default_rng(0).standard_normal(M.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = M @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        new = np.sqrt(nw)
        v = w / nw
        if abs(new - est) <= tol * max(new, 1.0):
            return float(new)
        est = new
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


def _reversible_kernel(pi: np.ndarray, rng) -> np.ndarray:
    """Random Metropolis-Hastings kernel with stationary law ``pi`` (hence D-self-adjoint)."""
    S = pi.size
    W = rng.random((S, S))
    W = W + W.T
    np.fill_diagonal(W, 0.0)
    W /= W.sum(axis=1).max()
    K = W * np.minimum(1.0, pi[None, :] / pi[:, None])
    K[np.diag_indices(S)] = np.maximum(1.0 - K.sum(axis=1), 0.0)
    return K


def random_system(S: int, d: int, spectral_target: float, rng, lam_kind: str = "kernel", max_retries: int = 20) -> AbstractLinearSystem:
    """Random system with sigma(P Lambda) equal to ``spectral_target``.

    P and Lambda / spectral_target are Metropolis-Hastings kernels for the
    same random stationary law D_P.  Both are self-adjoint contractions in the
    D-inner product and their product is stochastic, so sigma(P Lambda) and
    the D-operator norm of P Lambda both equal ``spectral_target``.
    ``lam_kind="identity"`` uses Lambda = spectral_target * I instead.
    """
    if not S > d >= 1:
        raise ValueError("need S > d >= 1")
    if not 0.0 < spectral_target < 1.0:
        raise ValueError("spectral_target must lie in (0, 1)")
    for _ in range(max_retries):
        D = rng.random(S) + 0.1
        D /= D.sum()
        P = _reversible_kernel(D, rng)
        if lam_kind == "identity":
            Lam = spectral_target * np.eye(S)
        elif lam_kind == "kernel":
            Lam = spectral_target * _reversible_kernel(D, rng)
        else:
            raise ValueError(f"unknown lam_kind {lam_kind!r}")
        Phi = rng.standard_normal((S, d))
        Phi /= np.linalg.norm(Phi, axis=1, keepdims=True)
        Y = rng.standard_normal(S)
        system = AbstractLinearSystem(Phi, D, P, Lam, Y)
        try:
            system.check()
        except (RankError, ValueError):
            continue
        return system
    raise RankError(f"no admissible system after {max_retries} draws")


def realizable(system: AbstractLinearSystem, rng) -> AbstractLinearSystem:
    """Same system with Y chosen so the exact solution lies in span(Phi)."""
    f = system.Phi @ rng.standard_normal(system.d)
    return AbstractLinearSystem(system.Phi, system.D, system.P, system.Lam, f - system.PL @ f)


def projection(system: AbstractLinearSystem, H: np.ndarray) -> np.ndarray:
    """D-weighted least-squares projection of H onto span(Phi)."""
    G = system.Phi.T @ (system.D[:, None] * system.Phi)
    try:
        coef = np.linalg.solve(G, system.Phi.T @ (system.D * H))
    except np.linalg.LinAlgError as exc:
        raise RankError("Phi^T D Phi is singular") from exc
    return system.Phi @ coef


def update_op(system: AbstractLinearSystem, H: np.ndarray) -> np.ndarray:
    return system.Y + system.PL @ H


def exact_solution(system: AbstractLinearSystem) -> np.ndarray:
    """f* solving (I - P Lambda) f = Y."""
    return np.linalg.solve(np.eye(system.S) - system.PL, system.Y)


@dataclass(frozen=True)
class FixedPointSolution:
    theta: np.ndarray
    kind: str  # "projected" | "standard"


def solve_projected_fixed_point(system: AbstractLinearSystem) -> FixedPointSolution:
    A = system.A
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError(f"A is singular to working precision (condition number {np.linalg.cond(A):.3g})")
    return FixedPointSolution(np.linalg.solve(A, system.b), "projected")


def solve_standard_fixed_point(system: AbstractLinearSystem) -> FixedPointSolution:
    B = (np.eye(system.S) - system.PL) @ system.Phi
    w = np.sqrt(system.D)
    theta, *_ = np.linalg.lstsq(w[:, None] * B, w * system.Y, rcond=None)
    return FixedPointSolution(theta, "standard")


def standard_objective_grad(system: AbstractLinearSystem, theta: np.ndarray) -> np.ndarray:
    B = (np.eye(system.S) - system.PL) @ system.Phi
    return 2.0 * B.T @ (system.D * (B @ theta - system.Y))


def projected_residual(system: AbstractLinearSystem, theta: np.ndarray) -> float:
    v = system.Phi @ theta
    return d_norm(system, v - projection(system, update_op(system, v)))


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    sigma: float
    satisfied: bool


def check_error_bound(system: AbstractLinearSystem) -> BoundCheck:
    """||Phi theta_DT - f*||_D^2 <= ||Pi f* - f*||_D^2 / (1 - sigma)."""
    sigma = spectral_radius(system.PL)
    if sigma >= 1.0:
        raise ValueError(f"the bound needs sigma < 1, got {sigma:.6g}")
    f_star = exact_solution(system)
    theta = solve_projected_fixed_point(system).theta
    lhs = d_norm(system, system.Phi @ theta - f_star) ** 2
    rhs = d_norm(system, projection(system, f_star) - f_star) ** 2 / (1.0 - sigma)
    return BoundCheck(lhs, rhs, sigma, lhs <= rhs * (1 + 1e-9) + 1e-300)


# -- stochastic approximation ------------------------------------------------

def rate_schedule(c: float = 1.0, t0: float = 20.0):
    """eta_t = c / (1 + t / t0): sum eta = inf, sum eta^2 < inf."""
    return lambda t: c / (1.0 + t / t0)


def _sample_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum((cdf < u[:, None]).sum(axis=1), cdf.shape[1] - 1)


def sample_updates(system: AbstractLinearSystem, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """n i.i.d. (A_t, b_t) pairs: A_t = phi(x) (phi(x) - psi(x'))^T, b_t = phi(x) y(x)."""
    x = _sample_rows(np.broadcast_to(np.cumsum(system.D), (n, system.S)), rng.random(n))
    xp = _sample_rows(np.cumsum(system.P, axis=1)[x], rng.random(n))
    phi = system.Phi[x]
    A = phi[:, :, None] * (phi - system.Psi[xp])[:, None, :]
    return A, phi * system.Y[x][:, None]


@numba.njit(cache=True)
def _sgd_block(theta, Phi, Psi, Y, cdf_d, cdf_p, u, eta, star, tol, blowup, t_start, hit, diverged):
    """Run one block of steps for every system in place; u is (K, T, 2), eta is (T,)."""
    K, T = u.shape[0], u.shape[1]
    S, d = Phi.shape[1], Phi.shape[2]
    for k in range(K):
        if diverged[k]:
            continue
        for i in range(T):
            x = min(np.searchsorted(cdf_d[k], u[k, i, 0], side="right"), S - 1)
            xp = min(np.searchsorted(cdf_p[k, x], u[k, i, 1], side="right"), S - 1)
            td = -Y[k, x]
            for j in range(d):
                td += (Phi[k, x, j] - Psi[k, xp, j]) * theta[k, j]
            e2 = 0.0
            n2 = 0.0
            for j in range(d):
                theta[k, j] -= eta[i] * td * Phi[k, x, j]
                e2 += (theta[k, j] - star[k, j]) ** 2
                n2 += theta[k, j] ** 2
            if hit[k] < 0 and e2 < tol * tol:
                hit[k] = t_start + i + 1
            if not n2 <= blowup * blowup:
                diverged[k] = True
                break


@dataclass
class SgdRun:
    theta: np.ndarray  # (K, d) final iterates
    errors: np.ndarray  # (n_checkpoints, K) distances to the fixed point
    checkpoints: np.ndarray
    steps_to_tol: np.ndarray  # first step with error < tol (or -1)
    diverged: np.ndarray
    steps: int  # steps actually run


def sgd_delayed_target(
    systems,
    steps: int,
    rng,
    schedule=None,
    tol: float = 1e-2,
    theta0=None,
    checkpoint_every: int = 2000,
    blowup: float = 1e8,
    stop_when_all_hit: bool = False,
) -> SgdRun:
    """Delayed-target iteration theta <- theta - eta_t (A_t theta - b_t), for many systems at once.

    Systems must share S and d.  Errors are measured against each system's
    projected fixed point after every step (for ``steps_to_tol``) and stored
    every ``checkpoint_every`` steps.  Uniforms come from ``rng`` in blocks,
    system-major, so a run is reproducible from the generator state.
    """
    if isinstance(systems, AbstractLinearSystem):
        systems = [systems]
    schedule = schedule or rate_schedule()
    K = len(systems)
    S, d = systems[0].S, systems[0].d
    if any(s.S != S or s.d != d for s in systems):
        raise ValueError("all systems must share S and d")
    Phi = np.ascontiguousarray(np.stack([s.Phi for s in systems]))
    Psi = np.ascontiguousarray(np.stack([s.Psi for s in systems]))
    Y = np.stack([s.Y for s in systems])
    cdf_d = np.stack([np.cumsum(s.D) for s in systems])
    cdf_p = np.ascontiguousarray(np.stack([np.cumsum(s.P, axis=1) for s in systems]))
    star = np.stack([solve_projected_fixed_point(s).theta for s in systems])
    theta = np.zeros((K, d)) if theta0 is None else np.array(theta0, dtype=np.float64).reshape(K, d).copy()
    hit = np.full(K, -1, dtype=np.int64)
    diverged = np.zeros(K, dtype=bool)
    checkpoints, errors = [], []
    t = 0
    while t < steps:
        T = min(checkpoint_every, steps - t)
        eta = np.array([schedule(t + i) for i in range(T)], dtype=np.float64)
        _sgd_block(theta, Phi, Psi, Y, cdf_d, cdf_p, rng.random((K, T, 2)), eta, star, tol, blowup, t, hit, diverged)
        t += T
        checkpoints.append(t)
        errors.append(np.linalg.norm(theta - star, axis=1))
        if stop_when_all_hit and np.all((hit > 0) | diverged):
            break
    return SgdRun(theta, np.array(errors), np.array(checkpoints), hit, diverged, t)


def full_gradient_descent(system: AbstractLinearSystem, steps: int, lr: float | None = None) -> np.ndarray:
    """Deterministic descent on the standard objective; returns errors to its minimiser per step."""
    B = (np.eye(system.S) - system.PL) @ system.Phi
    H = 2.0 * B.T @ (system.D[:, None] * B)
    lr = 1.0 / np.max(np.linalg.eigvalsh(H)) if lr is None else lr
    star = solve_standard_fixed_point(system).theta
    theta = np.zeros(system.d)
    errs = np.empty(steps)
    for t in range(steps):
        theta = theta - lr * standard_objective_grad(system, theta)
        errs[t] = np.linalg.norm(theta - star)
    return errs
