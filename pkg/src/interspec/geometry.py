"""V-cavity discretization and the facet-to-facet exchange matrix.

Coordinates: the fold runs along the y axis from y=0 to y=side. Panel A
leaves the fold along ``(sin(a/2), 0, cos(a/2))`` and panel B along
``(-sin(a/2), 0, cos(a/2))`` where ``a`` is the opening angle, so the
cavity opens toward +z (camera and light side). Facets are stored panel A
first, then panel B; inside a panel row-major with row 0 touching the fold.
"""
from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .errors import ContractError, DomainError, SingularityError, VersionError

DEFAULT_SAMPLES = 256
NEAR_FIELD_BOOST = 16
# pairs closer than this many facet diagonals integrate the inner facet exactly
EXACT_INNER_RADIUS = 2.0


@dataclass(frozen=True)
class Facet:
    center: np.ndarray
    normal: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    half_u: float
    half_v: float

    @property
    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v


@dataclass(frozen=True, eq=False)
class VCavity:
    angle: float
    side: float
    n: int
    centers: np.ndarray  # (2n^2, 3)
    normals: np.ndarray  # (2n^2, 3)
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    half: float  # half-extent along both tangents (square facets)

    @property
    def m(self) -> int:
        return len(self.centers)

    @property
    def facet_area(self) -> float:
        return 4.0 * self.half * self.half

    @property
    def areas(self) -> np.ndarray:
        return np.full(self.m, self.facet_area)

    @property
    def panel(self) -> np.ndarray:
        """0 for panel A facets, 1 for panel B."""
        return np.repeat([0, 1], self.n * self.n)

    @property
    def facets(self) -> list[Facet]:
        return [
            Facet(self.centers[i], self.normals[i], self.tangent_u[i], self.tangent_v[i], self.half, self.half)
            for i in range(self.m)
        ]

    def facet_index(self, panel, row, col) -> int:
        return panel * self.n * self.n + row * self.n + col


def build_v_cavity(angle: float = 45.0, side: float = 1.0, n: int = 10) -> VCavity:
    if not 0 < angle <= 180:
        raise DomainError(f"opening angle must lie in (0, 180], got {angle}")
    if n < 1 or side <= 0:
        raise DomainError("need n >= 1 and side > 0")
    half_rad = np.radians(angle) / 2
    s, c = np.sin(half_rad), np.cos(half_rad)
    # inward normals; at 180 degrees both become +z
    dirs = [np.array([s, 0.0, c]), np.array([-s, 0.0, c])]
    norms = [np.array([-c, 0.0, s]), np.array([c, 0.0, s])]
    h = side / n
    y = np.array([0.0, 1.0, 0.0])
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    a = (rows.ravel() + 0.5) * h
    b = (cols.ravel() + 0.5) * h
    centers, normals, tu, tv = [], [], [], []
    for d, nrm in zip(dirs, norms):
        centers.append(a[:, None] * d + b[:, None] * y)
        normals.append(np.tile(nrm, (n * n, 1)))
        tu.append(np.tile(d, (n * n, 1)))
        tv.append(np.tile(y, (n * n, 1)))
    return VCavity(
        float(angle), float(side), int(n),
        np.vstack(centers), np.vstack(normals), np.vstack(tu), np.vstack(tv), h / 2,
    )


def geometric_kernel_point(p_i, n_i, p_j, n_j):
    """cos(theta_i) cos(theta_j) / d^2 between two oriented points.

    Written with unnormalized separation vectors over d^4; back-facing
    configurations give 0. Broadcasts over leading axes.
    """
    p_i, n_i, p_j, n_j = (np.asarray(v, dtype=float) for v in (p_i, n_i, p_j, n_j))
    d = p_j - p_i
    d2 = np.sum(d * d, axis=-1)
    if np.any(d2 == 0):
        raise SingularityError("kernel is singular for coincident points")
    ci = np.sum(n_i * d, axis=-1)
    cj = -np.sum(n_j * d, axis=-1)
    k = np.maximum(ci, 0.0) * np.maximum(cj, 0.0) / (d2 * d2)
    return k if k.ndim else float(k)


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    matrix: np.ndarray
    samples: int
    seed: int
    angle: float = float("nan")
    n: int = 0
    raw_asymmetry: float = 0.0  # max |K - K^T| before symmetrization

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


def _unit_samples(rng, count, dims):
    """Scrambled-Sobol points in the unit ``dims``-cube (randomized QMC) when
    ``count`` is a power of two, plain uniform otherwise."""
    if count & (count - 1) == 0:
        return qmc.Sobol(dims, scramble=True, seed=rng).random(count)
    return rng.random((count, dims))


def _on_facet(f, uv):
    su = (2 * uv[:, 0] - 1) * f.half_u
    sv = (2 * uv[:, 1] - 1) * f.half_v
    return f.center + su[:, None] * f.tangent_u + sv[:, None] * f.tangent_v


def point_to_square_form_factor(points, normal, center, tu, tv, half):
    """Exact differential-area-to-square form factor by the edge contour sum.

    Assumes the square lies entirely in front of every point's tangent plane.
    """
    corners = np.array([
        center - half * tu - half * tv,
        center + half * tu - half * tv,
        center + half * tu + half * tv,
        center - half * tu + half * tv,
    ])
    R = corners[None, :, :] - np.asarray(points)[:, None, :]  # (P, 4, 3)
    R1 = np.roll(R, -1, axis=1)
    cross = np.cross(R, R1)
    cn = np.linalg.norm(cross, axis=-1)
    dot = np.sum(R * R1, axis=-1)
    gamma = np.arctan2(cn, dot)
    with np.errstate(invalid="ignore", divide="ignore"):
        contrib = np.where(cn > 0, gamma * (cross @ normal) / cn, 0.0)
    return np.abs(contrib.sum(axis=1)) / (2 * np.pi)


def facet_pair_kernel(fi: Facet, fj: Facet, samples, rng, near=False):
    """Unscaled pair estimate: mean point-pair kernel over facet i x facet j.

    With ``near`` the inner integral over facet j is done exactly for each
    sampled point of facet i (the point-pair estimator has unbounded variance
    when the facets share an edge); the value returned is on the same scale.
    """
    if near:
        pi = _on_facet(fi, _unit_samples(rng, samples, 2))
        ff = point_to_square_form_factor(pi, fi.normal, fj.center, fj.tangent_u, fj.tangent_v, fj.half_u)
        return float(np.mean(ff) * np.pi / fj.area)
    u = _unit_samples(rng, samples, 4)
    pi = _on_facet(fi, u[:, :2])
    pj = _on_facet(fj, u[:, 2:])
    return float(np.mean(geometric_kernel_point(pi, fi.normal, pj, fj.normal)))


def _pair_estimate(cav: VCavity, i, j, samples, seed, near):
    # counter-based substream: the stream depends only on (seed, i, j)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, j)))
    fi = Facet(cav.centers[i], cav.normals[i], cav.tangent_u[i], cav.tangent_v[i], cav.half, cav.half)
    fj = Facet(cav.centers[j], cav.normals[j], cav.tangent_u[j], cav.tangent_v[j], cav.half, cav.half)
    return facet_pair_kernel(fi, fj, samples, rng, near)


def _row_block(args):
    cav, rows, samples, seed = args
    m = cav.m
    panel = cav.panel
    diag = np.sqrt(2.0) * 2 * cav.half
    out = np.zeros((len(rows), m))
    for r, i in enumerate(rows):
        for j in range(m):
            if panel[i] == panel[j]:
                continue
            dist = np.linalg.norm(cav.centers[i] - cav.centers[j])
            count = samples * NEAR_FIELD_BOOST if dist < diag else samples
            out[r, j] = _pair_estimate(cav, i, j, count, seed, dist < EXACT_INNER_RADIUS * diag)
    return out


def monte_carlo_kernel(
    cav: VCavity, samples_per_pair: int = DEFAULT_SAMPLES, seed: int = 0, workers: int = 1,
    symmetrize: bool = True,
) -> KernelMatrix:
    """Assemble the m x m exchange matrix by Monte Carlo integration.

    Entry (i, j) is ``S_j / pi`` times the mean point-pair kernel over uniform
    samples on facets i and j. Each ordered pair draws from its own random
    substream, so the result does not depend on ``workers``. Pairs closer
    than a facet diagonal get ``NEAR_FIELD_BOOST`` times more samples, and
    pairs within ``EXACT_INNER_RADIUS`` diagonals sample only facet i and
    integrate facet j in closed form.
    """
    if samples_per_pair < 1:
        raise ContractError("samples_per_pair must be >= 1")
    m = cav.m
    if cav.angle >= 180:
        K = np.zeros((m, m))
    else:
        chunks = [list(r) for r in np.array_split(np.arange(m), max(1, workers))]
        jobs = [(cav, rows, samples_per_pair, seed) for rows in chunks if rows]
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                blocks = list(ex.map(_row_block, jobs))
        else:
            blocks = [_row_block(j) for j in jobs]
        K = np.vstack(blocks) * (cav.areas[None, :] / np.pi)
    asym = float(np.max(np.abs(K - K.T))) if m else 0.0
    if symmetrize:
        K = 0.5 * (K + K.T)
    return KernelMatrix(K, samples_per_pair, seed, cav.angle, cav.n, asym)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(self.eigenvalues))) if len(self.eigenvalues) else 0.0

    def reconstruct(self) -> np.ndarray:
        Q = self.eigenvectors
        return (Q * self.eigenvalues) @ Q.T


def eigendecompose(K, tol: float = 1e-12) -> EigenSystem:
    K = np.asarray(K.matrix if isinstance(K, KernelMatrix) else K, dtype=float)
    scale = max(np.max(np.abs(K)), 1e-300) if K.size else 1.0
    if K.size and np.max(np.abs(K - K.T)) > tol * scale:
        raise ContractError("eigendecompose needs a symmetric matrix")
    mu, Q = np.linalg.eigh(K)
    order = np.argsort(mu)[::-1]
    return EigenSystem(mu[order], Q[:, order])


# ---------------------------------------------------------------------------
# on-disk kernel cache

_CACHE_MAGIC = b"VCKERNEL"
_CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<8sIIdIIq")


def save_kernel(path, K: KernelMatrix):
    mat = np.ascontiguousarray(K.matrix, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(_CACHE_MAGIC, _CACHE_VERSION, K.m, K.angle, K.n, K.samples, K.seed))
        fh.write(mat.tobytes())


def load_kernel(path) -> KernelMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise VersionError(f"{path}: truncated kernel header")
    magic, version, m, angle, n, samples, seed = _CACHE_HEADER.unpack_from(raw)
    if magic != _CACHE_MAGIC or version != _CACHE_VERSION:
        raise VersionError(f"{path}: not a version-{_CACHE_VERSION} kernel file")
    body = raw[_CACHE_HEADER.size:]
    if len(body) != 8 * m * m:
        raise VersionError(f"{path}: kernel body has {len(body)} bytes, expected {8 * m * m}")
    mat = np.frombuffer(body, dtype="<f8").reshape(m, m).astype(float)
    return KernelMatrix(mat, samples, seed, angle, n)


def cache_dir() -> Path:
    return Path(os.environ.get("INTERSPEC_CACHE", Path.home() / ".cache" / "interspec"))


def cached_kernel(angle=45.0, n=10, samples=DEFAULT_SAMPLES, seed=0, side=1.0, workers=1, directory=None):
    """Load the kernel for (angle, n, samples, seed) from the cache, computing
    and storing it on a miss. The side length is immaterial (scale invariance)."""
    directory = Path(directory) if directory is not None else cache_dir()
    angle = float(angle)
    key = hashlib.sha1(f"{angle!r}|{int(n)}|{int(samples)}|{int(seed)}".encode()).hexdigest()[:16]
    path = directory / f"kernel_{angle:g}deg_n{n}_{key}.bin"
    if path.exists():
        try:
            return load_kernel(path)
        except VersionError:
            pass
    K = monte_carlo_kernel(build_v_cavity(angle, side, n), samples, seed, workers)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    save_kernel(tmp, K)
    os.replace(tmp, path)
    return K
