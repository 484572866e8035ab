"""BLUP and EBLUP of the mixed targets, with delta-derivatives of the weights.

The predictor of ``mu_i = l_i' beta + h_i' v_i`` is

    mu_i~ = l_i' beta^(delta) + b_i(delta)' (y_i - X_i beta^),
    b_i(delta)' = h_i' G(delta) Z_i' V_i(delta)^{-1},

and the EBLUP plugs a fitted delta into the same expressions.  The
analytic derivative of ``b_i`` feeds the covariance corrections; finite
differences are used only as test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import VarianceFit, block_workspace, gls_beta
from .exceptions import StructuralError
from .model import CovarianceStructure, LmmDataset, MixedTargets, VarianceParams, as_delta

__all__ = ["BlupComponents", "Prediction", "blup_components", "blup", "eblup",
           "random_effects"]


@dataclass(frozen=True)
class BlupComponents:
    """Per-cluster BLUP weights ``b_i``, residual coefficients ``d_i = l_i - X_i'b_i``
    and the weight derivatives ``db[i][:, e] = db_i/ddelta_e``."""

    b: list[np.ndarray]
    d: np.ndarray           # (m, p)
    db: list[np.ndarray]    # each (n_i, r)


@dataclass(frozen=True)
class Prediction:
    """Predicted mixed targets, one entry per cluster."""

    mu: np.ndarray
    delta_used: VarianceParams
    kind: str  # "blup" | "eblup"
    converged: bool = True


def blup_components(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    targets: MixedTargets,
    delta,
    ws=None,
) -> BlupComponents:
    """Weights ``b_i = V_i^{-1} Z_i G h_i`` and their delta-derivatives."""
    delta = struct.check_delta(delta)
    if targets.m != dataset.m:
        raise StructuralError("targets and dataset disagree on the number of clusters")
    if ws is None:
        ws = block_workspace(dataset, struct, delta)
    r = struct.n_params
    G = struct.g_of(delta)
    b_list, db_list = [], []
    d = np.empty((dataset.m, dataset.p))
    for i, blk in enumerate(dataset.blocks):
        vinv = ws.vinv[i]
        zgh = blk.Z @ (G @ targets.h[i])
        b = vinv @ zgh
        db = np.empty((blk.n, r))
        for e in range(r):
            zdgh = blk.Z @ (struct.dg(delta, e) @ targets.h[i])
            db[:, e] = vinv @ zdgh - vinv @ (ws.dv[i][e] @ b)
        b_list.append(b)
        db_list.append(db)
        d[i] = targets.l[i] - blk.X.T @ b
    return BlupComponents(b=b_list, d=d, db=db_list)


def blup(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    targets: MixedTargets,
    delta,
    beta=None,
) -> Prediction:
    """BLUP at a given delta; ``beta`` defaults to the GLS estimate at delta."""
    delta = struct.check_delta(delta)
    if beta is None:
        beta, _ = gls_beta(dataset, struct, delta)
    beta = np.asarray(beta, dtype=float)
    comp = blup_components(dataset, struct, targets, delta)
    mu = np.empty(dataset.m)
    for i, blk in enumerate(dataset.blocks):
        mu[i] = float(targets.l[i] @ beta + comp.b[i] @ (blk.y - blk.X @ beta))
    return Prediction(mu=mu, delta_used=VarianceParams(delta), kind="blup")


def eblup(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    targets: MixedTargets,
    fit: VarianceFit,
) -> Prediction:
    """BLUP evaluated at the fitted ``(delta_hat, beta_hat)``.

    An unconverged fit is allowed; the flag is carried on the result.
    """
    pred = blup(dataset, struct, targets, fit.delta, beta=fit.beta_hat)
    kind = "blup" if fit.method == "known" else "eblup"
    return Prediction(mu=pred.mu, delta_used=fit.delta_hat, kind=kind,
                      converged=fit.converged)


def random_effects(dataset, struct, delta, beta) -> np.ndarray:
    """Predicted random effects ``v_i = G Z_i' V_i^{-1}(y_i - X_i beta)``, (m, q)."""
    delta = as_delta(delta)
    ws = block_workspace(dataset, struct, delta)
    G = struct.g_of(delta)
    out = np.empty((dataset.m, dataset.q))
    for i, blk in enumerate(dataset.blocks):
        out[i] = G @ (blk.Z.T @ (ws.vinv[i] @ (blk.y - blk.X @ beta)))
    return out
