"""Box-constrained least-squares reflectance recovery through the forward model,
with a known illuminant, camera and cavity geometry."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ContractError, NumericError, RankError, ShapeError
from .geometry import EigenSystem
from .spectra import DEFAULT_GRID, CameraSensitivities, ReflectanceSpectrum, _vals


@dataclass(frozen=True, eq=False)
class ReflectanceBasis:
    """``components`` is (k, q) with orthonormal rows; ``mean`` is (q,)."""

    components: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def project(self, R):
        R = np.asarray(R, dtype=float)
        return (R - self.mean) @ self.components.T

    def reconstruct(self, coeffs):
        return self.mean + np.asarray(coeffs) @ self.components

    def span(self) -> np.ndarray:
        """Orthonormal (q, k+1) basis of span{mean, components}; the solver
        searches this linear space so that r = 0 stays reachable."""
        P, _ = np.linalg.qr(np.c_[self.mean, self.components.T])
        return P


def build_basis(reflectances, k: int) -> ReflectanceBasis:
    """Top-``k`` principal components of mean-centred reflectances."""
    R = np.asarray(reflectances, dtype=float)
    if R.ndim != 2:
        raise ShapeError("reflectances must be an (N, q) matrix")
    if k < 1 or k > R.shape[1]:
        raise ContractError(f"k must lie in [1, {R.shape[1]}]")
    mean = R.mean(axis=0)
    _, s, Vt = np.linalg.svd(R - mean, full_matrices=False)
    rank = int(np.sum(s > s[0] * max(R.shape) * np.finfo(float).eps)) if len(s) else 0
    if k > rank:
        raise RankError(f"requested {k} components but the centred data has rank {rank}")
    return ReflectanceBasis(Vt[:k].copy(), mean, s[:k] ** 2 / max(len(R) - 1, 1))


@dataclass
class SolverConfig:
    k: int = 8
    max_iter: int = 300
    grad_tol: float = 1e-10
    step_rule: str = "armijo"
    projection_tol: float = 1e-13
    # the folded-cavity objective has shallow spurious minima; extra starts
    # are drawn from the basis coefficient distribution
    starts: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.max_iter < 1 or self.starts < 1:
            raise ContractError("solver needs k >= 1 and at least one iteration")
        if self.step_rule not in ("armijo", "fixed"):
            raise ContractError(f"unknown step rule {self.step_rule!r}")


@dataclass
class EstimateResult:
    reflectance: ReflectanceSpectrum
    coefficients: np.ndarray
    converged: bool
    iterations: int
    objective_trace: list = field(default_factory=list)
    jacobian_rank: int = 0
    ambiguous: bool = False
    message: str = ""


class PanelModel:
    """Panel-A image as a function of a uniform reflectance, via the
    eigensystem: rho[i, s] = sum_l C[s, l] E[l] dl / pi * sum_j Q[i, j] p[j] r_l / (1 - r_l mu_j)."""

    def __init__(self, eig: EigenSystem, n: int, illum, cam: CameraSensitivities):
        e = _vals(illum, cam.grid)
        self.Qp = eig.eigenvectors[: n * n]  # panel rows
        self.p = eig.eigenvectors.sum(axis=0)  # Q^T 1
        self.mu = eig.eigenvalues
        self.W = cam.matrix * (e * cam.grid.step / np.pi)  # (s, q)
        self.n = n
        self.spectral_radius = eig.spectral_radius

    def render(self, r):
        w = r[:, None] / (1.0 - r[:, None] * self.mu)  # (q, m)
        L = (w * self.p) @ self.Qp.T  # (q, n*n)
        return L.T @ self.W.T  # (n*n, s)

    def residual_and_grad(self, r, target):
        res = self.render(r) - target
        A = res @ self.W  # (n*n, q)
        D = self.p / (1.0 - r[:, None] * self.mu) ** 2  # (q, m)
        g = np.sum((A.T @ self.Qp) * D, axis=1)  # (q,)
        return 0.5 * float(np.sum(res * res)), g

    def jacobian(self, r):
        D = self.p / (1.0 - r[:, None] * self.mu) ** 2  # dL/dr per (q, m)
        dL = D @ self.Qp.T  # (q, n*n)
        return np.einsum("lf,sl->fsl", dL, self.W).reshape(-1, len(r))  # (n*n*s, q)


def project_box_span(P, x, tol=1e-13):
    """Euclidean projection of ``x`` (q,) onto {P c : 0 <= P c <= 1} with P
    orthonormal; returns the coefficients c. With P orthonormal this is
    min ||c - P^T x||^2 under 2q linear inequalities, a small QP."""
    c0 = P.T @ x
    y = P @ c0
    if y.min() >= 0.0 and y.max() <= 1.0:
        return c0
    start = P.T @ np.clip(y, 0.0, 1.0)
    res = minimize(
        lambda c: 0.5 * float((c - c0) @ (c - c0)),
        start,
        jac=lambda c: c - c0,
        method="SLSQP",
        constraints=[
            {"type": "ineq", "fun": lambda c: P @ c, "jac": lambda c: P},
            {"type": "ineq", "fun": lambda c: 1.0 - P @ c, "jac": lambda c: -P},
        ],
        options={"ftol": tol, "maxiter": 500},
    )
    c = res.x
    # polish tiny violations left by the QP tolerance along the box faces
    y = P @ c
    if y.min() < 0.0 or y.max() > 1.0:
        c = P.T @ np.clip(y, 0.0, 1.0)
    return c


def _descend(model, P, target, c, cfg, scale):
    """One projected descent run from feasible coefficients ``c``."""

    def f_and_g(c):
        val, g = model.residual_and_grad(P @ c, target)
        return val, P.T @ g

    f, g = f_and_g(c)
    if not np.isfinite(f):
        raise NumericError("non-finite objective at the starting point")
    trace = [f]
    stalled = 0
    damping = 1e-3
    t_pg = 0.0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        J = model.jacobian(P @ c) @ P
        H = J.T @ J
        accepted = False
        if cfg.step_rule == "armijo":
            # Gauss-Newton scaled direction, projected back onto the box
            d = -np.linalg.solve(H + damping * np.trace(H) / len(H) * np.eye(len(H)), g)
            t = 1.0
            while t > 1e-10:
                c_new = project_box_span(P, P @ (c + t * d), cfg.projection_tol)
                f_new, g_new = f_and_g(c_new)
                if np.isfinite(f_new) and f_new <= f + 1e-4 * (g @ (c_new - c)) and f_new <= f:
                    accepted = True
                    break
                t *= 0.5
            damping = max(damping / 10, 1e-12) if accepted and t == 1.0 else min(damping * 10, 1e6)
        if not accepted or f_new > 0.5 * f:
            # projected-gradient step along the projection arc; the trial step
            # grows across iterations so it can snap onto active box faces
            t = max(4.0 * t_pg, 1.0 / max(np.linalg.norm(J, 2) ** 2, 1e-300))
            while True:
                c_pg = project_box_span(P, P @ (c - t * g), cfg.projection_tol)
                f_pg, g_pg = f_and_g(c_pg)
                if not np.isfinite(f_pg):
                    raise NumericError("non-finite objective during line search")
                dd = c_pg - c
                if f_pg <= f + g @ dd + (dd @ dd) / (2 * t) or t < 1e-300:
                    break
                t *= 0.5
            t_pg = t
            if not accepted or f_pg < f_new:
                c_new, f_new, g_new = c_pg, f_pg, g_pg
        step = np.linalg.norm(c_new - c)
        decrease = f - f_new
        c, f, g = c_new, f_new, g_new
        trace.append(f)
        stalled = stalled + 1 if decrease <= cfg.grad_tol * max(f, 1e-300) or step <= 1e-15 else 0
        if f <= 1e-28 * scale or stalled >= 5:
            return c, f, True, it, trace
    return c, f, False, it, trace


def estimate_reflectance(image, eig: EigenSystem, illum, cam: CameraSensitivities, basis: ReflectanceBasis,
                         cfg: SolverConfig | None = None) -> EstimateResult:
    """Fit basis coefficients so the rendered panel matches ``image`` (n, n, s).

    Projected steps on the box r in [0, 1]: a Gauss-Newton scaled direction
    with Armijo backtracking, falling back to a plain projected-gradient step
    when the scaled one makes no progress. Several starts are tried and the
    best fit kept. Reports the Jacobian rank at the solution and flags the
    flat-geometry ambiguity when the image cannot pin down every coefficient.
    """
    cfg = cfg or SolverConfig(k=basis.k)
    img = np.asarray(image, dtype=float)
    if img.ndim != 3 or img.shape[0] != img.shape[1] or img.shape[2] != cam.channels:
        raise ShapeError(f"expected an (n, n, {cam.channels}) image, got {img.shape}")
    n = img.shape[0]
    if eig.eigenvectors.shape[0] < 2 * n * n:
        raise ShapeError("image size does not match the cavity")
    model = PanelModel(eig, n, illum, cam)
    target = img.reshape(n * n, -1)
    P = basis.span()
    scale = float(np.sum(target * target))
    if scale == 0.0:
        # dark image: measure progress against the objective at the mean
        scale = model.residual_and_grad(np.clip(basis.mean, 0, 1), target)[0]
    scale = max(scale, 1e-300)

    rng = np.random.default_rng(cfg.seed)
    sd = np.sqrt(basis.explained_variance)
    starts = [basis.mean] + [
        basis.reconstruct(rng.standard_normal(basis.k) * sd) for _ in range(cfg.starts - 1)
    ]
    best = None
    total_iter = 0
    for start in starts:
        c0 = project_box_span(P, np.clip(start, 0.0, 1.0), cfg.projection_tol)
        run = _descend(model, P, target, c0, cfg, scale)
        total_iter += run[3]
        if best is None or run[1] < best[1]:
            best = run
        if best[1] <= 1e-24 * scale:
            break
    c, f, converged, _, trace = best
    r = np.clip(P @ c, 0.0, 1.0)
    J = model.jacobian(r) @ P
    sv = np.linalg.svd(J, compute_uv=False)
    rank = int(np.sum(sv > sv[0] * 1e-9)) if sv.size and sv[0] > 0 else 0
    ambiguous = rank < P.shape[1]
    msg = ""
    if ambiguous:
        msg = (f"image constrains only {rank} of {P.shape[1]} reflectance coefficients; "
               "the estimate is one of many exact fits")
        if model.spectral_radius == 0:
            msg = "flat geometry: " + msg
    grid = cam.grid if cam.grid is not None else DEFAULT_GRID
    return EstimateResult(ReflectanceSpectrum(r, grid), c, converged, total_iter, trace, rank, ambiguous, msg)
