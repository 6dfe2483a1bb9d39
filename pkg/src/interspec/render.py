"""Discrete self-interreflection model: bounce series, closed-form radiance,
camera integration and panel images.

Spectral quantities are carried as (q, m) arrays: one row per wavelength,
one column per facet.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .errors import ContractError, DivergenceError, InfeasibleError, ShapeError, SingularityError
from .geometry import EigenSystem, KernelMatrix, VCavity, eigendecompose
from .spectra import CameraSensitivities, IlluminantSPD, WavelengthGrid, _vals


@dataclass(frozen=True, eq=False)
class IrradianceField:
    values: np.ndarray  # (q, m)
    grid: WavelengthGrid

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class RenderedPatch:
    values: np.ndarray  # (m, s)


def _kmat(K):
    return np.asarray(K.matrix if isinstance(K, KernelMatrix) else K, dtype=float)


def direct_irradiance(illum: IlluminantSPD, m: int) -> IrradianceField:
    """Collimated frontal light: every facet receives illum(lambda)."""
    if m < 1:
        raise ContractError("need at least one facet")
    e = np.asarray(illum.values, dtype=float)
    return IrradianceField(np.repeat(e[:, None], m, axis=1), illum.grid)


def nbounce_irradiance(K, r, E0: IrradianceField, n: int) -> IrradianceField:
    """Cumulated irradiance after ``n`` bounces, sum_b (r K)^b E0 per wavelength."""
    if n < 0:
        raise ContractError("bounce count must be >= 0")
    K = _kmat(K)
    rv = _vals(r, E0.grid)
    total = E0.values.copy()
    term = E0.values.copy()
    for _ in range(n):
        term = rv[:, None] * (term @ K.T)
        total += term
    return IrradianceField(total, E0.grid)


def infinite_bounce_radiance(K, r, E0: IrradianceField, check_radius=True) -> IrradianceField:
    """Radiance toward the camera, (1/pi) (R^-1 - K)^-1 E0, by dense solves per
    wavelength. Wavelengths with r = 0 give zero radiance."""
    K = _kmat(K)
    rv = _vals(r, E0.grid)
    m = K.shape[0]
    if check_radius and m:
        rho = float(np.max(np.abs(np.linalg.eigvals(K))))
        if np.max(rv) * rho >= 1:
            raise DivergenceError(f"spectral radius {np.max(rv) * rho:.4f} >= 1, bounce series diverges")
    out = np.zeros_like(E0.values, dtype=float)
    eye = np.eye(m)
    for k, rk in enumerate(rv):
        if rk == 0:
            continue
        out[k] = np.linalg.solve(eye / rk - K, E0.values[k])
    return IrradianceField(out / np.pi, E0.grid)


def infinite_bounce_radiance_eig(eig: EigenSystem, r, E0: IrradianceField) -> IrradianceField:
    """Same contract as :func:`infinite_bounce_radiance`, through K = Q diag(mu) Q^T."""
    rv = _vals(r, E0.grid)
    Q, mu = eig.eigenvectors, eig.eigenvalues
    if np.max(rv, initial=0.0) * eig.spectral_radius >= 1:
        raise DivergenceError("spectral radius >= 1, bounce series diverges")
    nz = rv > 0
    with np.errstate(divide="ignore"):
        inv_r = np.where(nz, 1.0 / np.where(nz, rv, 1.0), np.inf)
    gap = inv_r[:, None] - mu[None, :]  # (q, m)
    if np.any(np.abs(gap[nz]) < 1e-12):
        raise SingularityError("1/r coincides with an eigenvalue of K")
    with np.errstate(divide="ignore"):
        w = np.where(nz[:, None], 1.0 / gap, 0.0)
    coeff = (E0.values @ Q) * w  # (q, m) in the eigenbasis
    return IrradianceField(coeff @ Q.T / np.pi, E0.grid)


def radiance_for_reflectances(eig: EigenSystem, R, illum) -> np.ndarray:
    """Batch eigen-path radiance for constant direct light.

    ``R`` is (N, q) reflectances, ``illum`` a (q,) SPD; returns (N, q, m).
    The direct field is illum(lambda) on every facet, so only the projection
    of the all-ones vector onto the eigenbasis is needed.
    """
    R = np.atleast_2d(np.asarray(R, dtype=float))
    e = np.asarray(illum, dtype=float)
    Q, mu = eig.eigenvectors, eig.eigenvalues
    if np.max(R, initial=0.0) * eig.spectral_radius >= 1:
        raise DivergenceError("spectral radius >= 1, bounce series diverges")
    ones_proj = Q.sum(axis=0)  # Q^T 1
    # 1 / (1/r - mu) == r / (1 - r mu), finite at r = 0
    w = R[..., None] / (1.0 - R[..., None] * mu)  # (N, q, m)
    return ((w * ones_proj) @ Q.T) * (e[None, :, None] / np.pi)


def camera_response(L: IrradianceField, cam: CameraSensitivities) -> RenderedPatch:
    """rho(facet, channel) = sum_lambda c(lambda) L(facet, lambda) dlambda."""
    if cam.grid != L.grid:
        raise ShapeError("radiance and camera live on different grids")
    return RenderedPatch(L.values.T @ cam.matrix.T * L.grid.step)


def panel_image(patch_values, n: int) -> np.ndarray:
    """Panel A of a rendered patch as an (n, n, s) array, row 0 at the fold."""
    v = np.asarray(patch_values)
    return v[..., : n * n, :].reshape(v.shape[:-2] + (n, n, v.shape[-1]))


def render_panel_image(cav: VCavity, eig: EigenSystem, r, illum: IlluminantSPD, cam: CameraSensitivities):
    E0 = direct_irradiance(illum, cav.m)
    L = infinite_bounce_radiance_eig(eig, r, E0)
    return panel_image(camera_response(L, cam).values, cav.n)


def render_panel_batch(eig: EigenSystem, n: int, R, illum, cam: CameraSensitivities) -> np.ndarray:
    """(N, n, n, s) panel images for a stack of reflectances under one illuminant."""
    L = radiance_for_reflectances(eig, R, illum)  # (N, q, m)
    rho = np.einsum("nqm,sq->nms", L, cam.matrix) * cam.grid.step
    return panel_image(rho, n)


# ---------------------------------------------------------------------------
# metamers


def construct_metameric_light(r, illum: IlluminantSPD, cam: CameraSensitivities, tol=1e-12) -> IlluminantSPD:
    """Light E' that makes a flat white surface match flat ``r`` under ``illum``.

    Returns the minimum-norm non-negative E' with C E' = C (r * illum). If
    ``r`` is the perfect reflector the original illuminant is returned.
    """
    grid = illum.grid
    rv = _vals(r, grid)
    e = np.asarray(illum.values, dtype=float)
    C = cam.matrix
    if C.shape[0] >= grid.count:
        raise ContractError("metamers need fewer channels than wavelengths")
    if np.all(rv == 1.0):
        return illum
    target = C @ (rv * e)
    # feasibility: target must be a non-negative combination of C's columns
    _, resid = nnls(C, target)
    if resid > 1e-9 * max(np.linalg.norm(target), 1e-300):
        raise InfeasibleError("no non-negative light reproduces the flat response")
    x = _min_norm_nonneg(C, target, tol)
    if not np.allclose(C @ x, target, rtol=1e-10, atol=1e-14):
        raise InfeasibleError("metamer solve did not converge")
    return IlluminantSPD(x, grid, f"metamer-of-{illum.name or 'illuminant'}")


def _min_norm_nonneg(C, t, tol, max_iter=200):
    """argmin ||x|| s.t. C x = t, x >= 0, via semismooth Newton on the dual:
    x = max(0, C^T nu) with C max(0, C^T nu) = t."""
    scale = np.linalg.norm(C, axis=1)
    Cs = C / scale[:, None]
    ts = t / scale
    nu = np.linalg.lstsq(Cs @ Cs.T, ts, rcond=None)[0]

    def dual(v):
        x = np.maximum(Cs.T @ v, 0.0)
        return v @ ts - 0.5 * x @ x

    for _ in range(max_iter):
        z = Cs.T @ nu
        active = z > 0
        F = Cs @ np.maximum(z, 0.0) - ts
        if np.linalg.norm(F) <= tol * max(np.linalg.norm(ts), 1.0):
            break
        J = (Cs[:, active]) @ Cs[:, active].T
        step = np.linalg.lstsq(J + 1e-14 * np.eye(len(nu)), -F, rcond=None)[0]
        # dual ascent with backtracking keeps the iteration monotone
        g0, a = dual(nu), 1.0
        while a > 1e-12 and dual(nu + a * step) < g0 - 1e-15 * abs(g0):
            a *= 0.5
        nu = nu + a * step
    return np.maximum(Cs.T @ nu, 0.0)
