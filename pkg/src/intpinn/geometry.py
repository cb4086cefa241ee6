"""Integration volumes and surface/boundary point samplers.

Balls and disks are handled in batches: ``centers`` is (n, d), ``radii`` is
(n,).  Samplers return arrays shaped (n, N, d) for points and directions and
(n, N) for quadrature weights, with weights summing to 1 per volume.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import betaincinv, gammaln


class SamplerKind(str, enum.Enum):
    IID_GAUSSIAN = "iid_gaussian"  # normalised Gaussians (d-dimensional integral)
    IID_INTRINSIC = "iid_intrinsic"  # uniform cube mapped onto the sphere
    LATTICE = "lattice"
    QMC = "qmc"  # additive recursion
    GAUSS_LEGENDRE = "gauss_legendre"

    @property
    def deterministic(self) -> bool:
        return self in (SamplerKind.LATTICE, SamplerKind.QMC, SamplerKind.GAUSS_LEGENDRE)


class UnsupportedConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


@dataclass(frozen=True)
class Disk:
    center: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64))
        if not self.radius > 0:
            raise ValueError("disk radius must be positive")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-12:
            raise ValueError("disk normal must be a unit vector")


@dataclass
class SurfaceSamples:
    points: np.ndarray  # (n, N, d)
    directions: np.ndarray  # (n, N, d) outward normals or boundary tangents
    weights: np.ndarray  # (n, N)


def surface_area(d: int, r) -> np.ndarray:
    """Area of the (d-1)-sphere of radius r in R^d."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    log_c = math.log(2.0) + 0.5 * d * math.log(math.pi) - gammaln(0.5 * d)
    return np.exp(log_c) * np.asarray(r, dtype=np.float64) ** (d - 1)


def unit_ball_volume(d: int) -> float:
    return math.exp(0.5 * d * math.log(math.pi) - gammaln(0.5 * d + 1.0))


# -- training volume distributions -------------------------------------------

BALL_PROFILES = ("box", "unit_ball_volume")


def sample_training_balls(profile: str, n: int, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random balls.

    ``box``: centres uniform on [-1, 1]^d, radii uniform on [0.1, 1.5].
    ``unit_ball_volume``: centres uniform in the unit ball and ball volume
    uniform on (0, volume of the unit ball], i.e. r = U^(1/d).
    """
    if profile == "box":
        centers = rng.uniform(-1.0, 1.0, size=(n, dim))
        radii = rng.uniform(0.1, 1.5, size=n)
    elif profile == "unit_ball_volume":
        centers = uniform_in_unit_ball(n, dim, rng)
        radii = (1.0 - rng.random(n)) ** (1.0 / dim)
    else:
        raise ValueError(f"unknown ball profile {profile!r}; expected one of {BALL_PROFILES}")
    return centers, radii


def sample_training_ball(profile: str, dim: int, rng: np.random.Generator) -> Ball:
    centers, radii = sample_training_balls(profile, 1, dim, rng)
    return Ball(centers[0], float(radii[0]))


def uniform_in_unit_ball(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.standard_normal((n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return z * ((1.0 - rng.random(n)) ** (1.0 / dim))[:, None]


def sample_training_disks(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centres and normals from the unit ball, squared radii uniform on [0, 1]."""
    centers = uniform_in_unit_ball(n, 3, rng)
    normals = uniform_in_unit_ball(n, 3, rng)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    radii = np.sqrt(1.0 - rng.random(n))  # (0, 1]; excludes the degenerate r = 0
    return centers, normals, radii


# -- per-volume deterministic pseudo-randomness --------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def volume_key(params: np.ndarray, seed: int) -> np.ndarray:
    """64-bit hash of each row of float parameters together with ``seed``."""
    bits = np.ascontiguousarray(params, dtype=np.float64).view(np.uint64)
    key = np.full(bits.shape[0], np.uint64(seed) & _MASK, dtype=np.uint64)
    for j in range(bits.shape[1]):
        key = _splitmix(key ^ bits[:, j])
    return key


def key_uniforms(key: np.ndarray, k: int) -> np.ndarray:
    """(n, k) uniforms in [0, 1) derived from per-volume keys."""
    cols = [_splitmix(key + np.uint64(i + 1)) >> np.uint64(11) for i in range(k)]
    return np.stack(cols, axis=1).astype(np.float64) / float(1 << 53)


# -- unit-cube to sphere maps --------------------------------------------------

def cube_to_sphere(u: np.ndarray, d: int) -> np.ndarray:
    """Measure-preserving map from [0,1)^(d-1) to the unit sphere in R^d.

    Polar angles come from the inverse CDF of their sin^k densities; the last
    coordinate is the azimuth.
    """
    if d == 1:
        return np.where(u[..., :1] < 0.5, -1.0, 1.0)
    phi = 2.0 * np.pi * u[..., -1]
    if d == 2:
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    coords = []
    sin_prod = np.ones(u.shape[:-1])
    for j in range(d - 2):
        a = 0.5 * (d - 1 - j)
        cos_t = 2.0 * betaincinv(a, a, u[..., j]) - 1.0
        sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, None))
        coords.append(sin_prod * cos_t)
        sin_prod = sin_prod * sin_t
    coords.append(sin_prod * np.cos(phi))
    coords.append(sin_prod * np.sin(phi))
    return np.stack(coords, axis=-1)


def golden_alphas(k: int) -> np.ndarray:
    """Additive-recursion steps 1/phi_k^j, phi_k the root of x^(k+1) = x + 1."""
    phi = 2.0
    for _ in range(64):
        phi = (1.0 + phi) ** (1.0 / (k + 1))
    return (1.0 / phi) ** np.arange(1, k + 1)


def additive_recursion(n: int, k: int, start: float = 0.5) -> np.ndarray:
    """x_i = frac(start + i * alpha), shape (n, k)."""
    i = np.arange(n, dtype=np.float64)[:, None]
    return np.mod(start + i * golden_alphas(k)[None, :], 1.0)


def _rank1_lattice(n: int, k: int) -> np.ndarray:
    """Fibonacci-style lattice in [0,1)^k: first coordinate stratified, the rest golden."""
    pts = np.empty((n, k))
    pts[:, 0] = (np.arange(n) + 0.5) / n
    if k > 1:
        i = np.arange(n, dtype=np.float64)[:, None]
        pts[:, 1:] = np.mod(i * golden_alphas(k - 1)[None, :], 1.0)
    return pts


def _gauss_legendre_sphere(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    if d == 2:
        x, w = leggauss(n)
        return 0.5 * (x[:, None] + 1.0), 0.5 * w
    if d == 3:
        n_t = max(k for k in range(1, int(math.isqrt(max(n // 2, 1))) + 1) if n % k == 0)
        n_p = n // n_t
        z, wz = leggauss(n_t)
        u0 = 0.5 * (1.0 - z)  # cos(theta) = 1 - 2 u0 = z
        u1 = (np.arange(n_p) + 0.5) / n_p
        uu = np.stack(np.meshgrid(u0, u1, indexing="ij"), axis=-1).reshape(-1, 2)
        ww = np.repeat(0.5 * wz, n_p) / n_p
        return uu, ww
    raise UnsupportedConfiguration("Gauss-Legendre surface rules exist only for d <= 3 (no sparse grids)")


@dataclass(frozen=True)
class Sampler:
    """Surface point sampler.

    ``rotation`` applies to the deterministic kinds: ``"per_volume"`` rotates
    (d = 2) or reflects (d >= 3) the point set by an amount hashed from the
    volume parameters and ``seed``, so a given volume always receives the same
    points while different volumes are not aligned; ``"none"`` disables it.
    """

    kind: SamplerKind = SamplerKind.IID_GAUSSIAN
    rotation: str = "per_volume"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if self.rotation not in ("per_volume", "none"):
            raise ValueError(f"unknown rotation mode {self.rotation!r}")

    @property
    def deterministic(self) -> bool:
        return self.kind.deterministic

    def unit_sphere(self, n_vol: int, N: int, d: int, rng, keys=None) -> tuple[np.ndarray, np.ndarray]:
        """Unit directions (n_vol, N, d) and weights (n_vol, N)."""
        kind = self.kind
        w = np.full((n_vol, N), 1.0 / N)
        if kind is SamplerKind.IID_GAUSSIAN:
            z = rng.standard_normal((n_vol, N, d))
            return z / np.linalg.norm(z, axis=-1, keepdims=True), w
        if kind is SamplerKind.IID_INTRINSIC:
            return cube_to_sphere(rng.random((n_vol, N, max(d - 1, 1))), d), w
        if kind is SamplerKind.LATTICE:
            if d == 2:
                u = (np.arange(N) / N)[:, None]
            else:
                u = _rank1_lattice(N, d - 1)
        elif kind is SamplerKind.QMC:
            u = additive_recursion(N, max(d - 1, 1))
        else:
            u, gw = _gauss_legendre_sphere(N, d)
            w = np.broadcast_to(gw, (n_vol, gw.size)).copy()
        dirs = np.broadcast_to(cube_to_sphere(u, d), (n_vol, u.shape[0], d)).copy()
        if self.rotation == "per_volume" and keys is not None:
            dirs = _rotate(dirs, keys, d)
        return dirs, w

    def sphere(self, centers, radii, N: int, rng=None) -> SurfaceSamples:
        """Points on the boundaries of balls, with outward normals."""
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
        if N < 1:
            raise ValueError("need at least one surface point")
        n_vol, d = centers.shape
        keys = None
        if self.deterministic:
            keys = volume_key(np.column_stack([centers, radii]), self.seed)
        dirs, w = self.unit_sphere(n_vol, N, d, rng, keys)
        pts = centers[:, None, :] + radii[:, None, None] * dirs
        return SurfaceSamples(pts, dirs, w)

    def circle(self, centers, normals, radii, N: int, rng=None) -> SurfaceSamples:
        """Points on the boundary circles of disks, with right-handed unit tangents."""
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
        radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
        if N < 1:
            raise ValueError("need at least one boundary point")
        n_vol = centers.shape[0]
        keys = None
        if self.deterministic:
            keys = volume_key(np.column_stack([centers, normals, radii]), self.seed)
        if self.kind is SamplerKind.IID_GAUSSIAN:
            # normalised 2-D Gaussians in the disk plane
            z = rng.standard_normal((n_vol, N, 2))
            phi = np.arctan2(z[..., 1], z[..., 0])
        else:
            flat = Sampler(self.kind, self.rotation, self.seed)
            dirs2, w = flat.unit_sphere(n_vol, N, 2, rng, keys)
            phi = np.arctan2(dirs2[..., 1], dirs2[..., 0])
        w = np.full((n_vol, N), 1.0 / N) if self.kind is not SamplerKind.GAUSS_LEGENDRE else w
        e1, e2 = plane_basis(normals)
        c, s = np.cos(phi)[..., None], np.sin(phi)[..., None]
        pts = centers[:, None, :] + radii[:, None, None] * (c * e1[:, None, :] + s * e2[:, None, :])
        tan = -s * e1[:, None, :] + c * e2[:, None, :]
        return SurfaceSamples(pts, tan, w)


def _rotate(dirs: np.ndarray, keys: np.ndarray, d: int) -> np.ndarray:
    if d == 2:
        ang = 2.0 * np.pi * key_uniforms(keys, 1)[:, 0]
        c, s = np.cos(ang)[:, None], np.sin(ang)[:, None]
        x, y = dirs[..., 0], dirs[..., 1]
        return np.stack([c * x - s * y, s * x + c * y], axis=-1)
    # Householder reflection about a hashed random unit vector
    u = key_uniforms(keys, 2 * d)
    g = np.sqrt(-2.0 * np.log1p(-u[:, :d])) * np.cos(2.0 * np.pi * u[:, d:])
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    proj = np.einsum("nkd,nd->nk", dirs, g)
    return dirs - 2.0 * proj[..., None] * g[:, None, :]


def plane_basis(normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (e1, e2) with e1 x e2 = normal."""
    normals = np.atleast_2d(normals)
    a = np.where(np.abs(normals[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = a - np.sum(a * normals, axis=1, keepdims=True) * normals
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(normals, e1)
    return e1, e2


# -- single-volume conveniences ---------------------------------------------------

def sample_surface(ball: Ball, N: int, kind, rng=None, rotation: str = "per_volume", seed: int = 0) -> SurfaceSamples:
    s = Sampler(SamplerKind(kind), rotation, seed).sphere(ball.center[None], [ball.radius], N, rng)
    return SurfaceSamples(s.points[0], s.directions[0], s.weights[0])


def sample_disk_boundary(disk: Disk, N: int, kind, rng=None, rotation: str = "per_volume", seed: int = 0) -> SurfaceSamples:
    s = Sampler(SamplerKind(kind), rotation, seed).circle(disk.center[None], disk.normal[None], [disk.radius], N, rng)
    return SurfaceSamples(s.points[0], s.directions[0], s.weights[0])


# -- source enclosure ----------------------------------------------------------------

def enclosed_charge(centers, radii, charge_pos, charge_q) -> np.ndarray:
    """Total charge inside each ball (distance == radius counts as inside)."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
    charge_pos = np.asarray(charge_pos, dtype=np.float64).reshape(-1, centers.shape[1])
    charge_q = np.asarray(charge_q, dtype=np.float64).reshape(-1)
    if charge_q.size == 0:
        return np.zeros(centers.shape[0])
    dist = np.linalg.norm(centers[:, None, :] - charge_pos[None, :, :], axis=-1)
    return (dist <= radii[:, None]).astype(np.float64) @ charge_q


def enclosed_current(centers, normals, radii, segments, current: float = 1.0) -> np.ndarray:
    """Signed current through each disk from a chain of straight wire segments.

    A segment a->b crosses when its endpoints lie strictly on opposite sides of
    the disk plane under the half-open rule ``(s_a < 0) != (s_b < 0)``, which
    counts a crossing at a shared vertex exactly once; the crossing counts when
    it lies within the radius, signed by direction . normal.  Segments inside
    the plane contribute nothing.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    normals = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
    total = np.zeros(centers.shape[0])
    for a, b in segments:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        seg = b - a
        if np.linalg.norm(seg) == 0.0:
            raise ValueError("zero-length wire segment")
        sa = np.sum((a - centers) * normals, axis=1)
        sb = np.sum((b - centers) * normals, axis=1)
        cross = (sa < 0) != (sb < 0)
        denom = np.where(cross, sa - sb, 1.0)
        t = sa / denom
        hit = a[None, :] + t[:, None] * seg[None, :]
        inside = np.linalg.norm(hit - centers, axis=1) <= radii
        sign = np.sign(normals @ seg)
        total += np.where(cross & inside, sign, 0.0)
    return current * total
