"""Reflectance, illuminant and color-signal consistency losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class LossWeights:
    reflectance: float = 1.0
    spd: float = 1.0
    consistency: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    L_R: float
    L_E: float
    L_S: float
    total: float


def loss_and_grads(R_hat, E_hat, R, E, cmfs, weights=LossWeights()):
    """Batch-averaged losses and their gradients w.r.t. the two outputs.

    ``cmfs`` is the (3, q) observer matrix. Passing ``E_hat=None`` is the
    single-illuminant mode: the estimated SPD in the consistency term is
    replaced by the known ``E`` and the SPD loss is zero.
    """
    R_hat = np.asarray(R_hat)
    R = np.asarray(R, dtype=R_hat.dtype)
    E = np.asarray(E, dtype=R_hat.dtype)
    fixed_light = E_hat is None
    E_used = E if fixed_light else np.asarray(E_hat)
    if R_hat.shape != R.shape or E_used.shape != R.shape or E.shape != R.shape:
        raise ShapeError("predictions and targets must share the (B, q) shape")
    F = np.asarray(cmfs, dtype=R_hat.dtype)
    if F.shape != (3, R.shape[-1]):
        raise ShapeError("CMF matrix must be 3 x q")
    B = R.shape[0]

    dR = R_hat - R
    L_R = 0.5 * np.sum(dR * dR) / B
    if fixed_light:
        L_E, dE = 0.0, None
    else:
        dE = E_used - E
        L_E = 0.5 * np.sum(dE * dE) / B
    # residual per observer channel: f*R_hat*E_hat - f*R*E, shape (B, 3, q)
    P = F[None] * (R_hat * E_used - R * E)[:, None, :]
    L_S = 0.5 * np.sum(P * P) / B

    wR, wE, wS = weights.reflectance, weights.spd, weights.consistency
    total = wR * L_R + wE * L_E + wS * L_S
    pf = np.sum(P * F[None], axis=1)  # (B, q)
    g_R = (wR * dR + wS * pf * E_used) / B
    g_E = None if fixed_light else (wE * dE + wS * pf * R_hat) / B
    return LossBreakdown(float(L_R), float(L_E), float(L_S), float(total)), g_R, g_E


def loss(R_hat, E_hat, R, E, cmfs, weights=LossWeights()) -> LossBreakdown:
    return loss_and_grads(R_hat, E_hat, R, E, cmfs, weights)[0]
