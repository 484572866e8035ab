"""Variance-component estimation: GLS, REML and Henderson III.

REML maximizes the restricted log-likelihood

    l_RE(delta) = -1/2 log|V| - 1/2 log|X'V^{-1}X| - 1/2 y'Py,
    P = V^{-1} - V^{-1}X(X'V^{-1}X)^{-1}X'V^{-1},

by Fisher scoring with step halving.  All evaluations run blockwise over
clusters (no n x n matrix is formed); the dense projector ``P`` is only
materialized on demand for consumers that genuinely need it.

Henderson III for the nested error regression model uses the closed-form
quadratic estimators ``delta_e = y'C_e y`` built from the projections on
the column spans of ``X`` and ``(X, Z)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DegenerateCovarianceError, NumericError, RankError
from .linalg import logdet_spd, woodbury_inverse
from .model import CovarianceStructure, LmmDataset, VarianceParams, ner_structure

__all__ = [
    "VarianceFit",
    "RemlWorkspace",
    "BlockWorkspace",
    "gls_beta",
    "restricted_loglik",
    "reml_score",
    "reml_fisher_info",
    "fisher_info_derivative",
    "fit_reml",
    "fit_henderson3_ner",
    "extract_ce",
    "CeOperators",
    "known_fit",
    "block_workspace",
    "reml_workspace",
]

REML_TOL = 1e-8
REML_MAX_ITER = 100
REML_MAX_HALVINGS = 30
DELTA_FLOOR = 1e-10


@dataclass(frozen=True)
class VarianceFit:
    """Result of a variance-component fit.

    ``vbar`` is the asymptotic covariance of ``delta_hat`` (the inverse
    Fisher information for REML, the conditional quadratic-form
    covariance for Henderson III, zeros when ``delta`` is known).
    ``beta_cov`` caches ``(X'V^{-1}X)^{-1}`` at ``delta_hat``.
    """

    delta_hat: VarianceParams
    beta_hat: np.ndarray
    vbar: np.ndarray
    method: str  # "reml" | "henderson3" | "known"
    iterations: int
    converged: bool
    boundary_flags: np.ndarray
    beta_cov: np.ndarray

    @property
    def delta(self) -> np.ndarray:
        return self.delta_hat.values


@dataclass
class BlockWorkspace:
    """Per-delta blockwise quantities reused by likelihood, score and info."""

    delta: np.ndarray
    vinv: list[np.ndarray]        # V_i^{-1}
    dv: list[list[np.ndarray]]    # dv[i][e] = dV_i/ddelta_e
    logdet_v: float
    A: np.ndarray                 # sum_i X_i' V_i^{-1} X_i
    a_inv: np.ndarray
    xtvy: np.ndarray              # sum_i X_i' V_i^{-1} y_i
    quad_y: float                 # sum_i y_i' V_i^{-1} y_i


@dataclass
class RemlWorkspace:
    """Dense projector ``P`` plus per-component dV appliers.

    Only built for consumers that need the full projector (third-order
    information derivatives, the REML correction term of the conditional
    covariance).  Satisfies ``P V P = P``.
    """

    delta: np.ndarray
    P: np.ndarray
    dv_full: list[np.ndarray]  # dense n x n derivative of V per component


def block_workspace(dataset: LmmDataset, struct: CovarianceStructure, delta) -> BlockWorkspace:
    delta = struct.check_delta(delta)
    r = struct.n_params
    G = struct.g_of(delta)
    p = dataset.p
    vinv, dv = [], []
    logdet_v = 0.0
    A = np.zeros((p, p))
    xtvy = np.zeros(p)
    quad_y = 0.0
    for i, b in enumerate(dataset.blocks):
        R = struct.r_of(delta, i)
        try:
            r_chol = np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise DegenerateCovarianceError(
                f"R is not positive definite for cluster {b.id!r} at delta={delta}"
            ) from None
        r_inv = np.linalg.inv(R)
        vi = woodbury_inverse(r_inv, b.Z, G)
        vinv.append(vi)
        # log|V_i| = log|R_i| + log|I_q + G Z'R^{-1}Z| (valid for singular G)
        inner = np.eye(G.shape[0]) + G @ (b.Z.T @ (r_inv @ b.Z))
        sign, ld_inner = np.linalg.slogdet(inner)
        if sign <= 0:
            raise DegenerateCovarianceError(
                f"V is not positive definite for cluster {b.id!r} at delta={delta}"
            )
        logdet_v += 2.0 * float(np.sum(np.log(np.diag(r_chol)))) + float(ld_inner)
        dv.append([
            struct.dr(delta, i, e) + b.Z @ struct.dg(delta, e) @ b.Z.T for e in range(r)
        ])
        vx = vi @ b.X
        A += b.X.T @ vx
        xtvy += vx.T @ b.y
        quad_y += float(b.y @ (vi @ b.y))
    a_inv = _inverse_information(A, dataset)
    return BlockWorkspace(
        delta=delta, vinv=vinv, dv=dv, logdet_v=logdet_v,
        A=A, a_inv=a_inv, xtvy=xtvy, quad_y=quad_y,
    )


def _inverse_information(A: np.ndarray, dataset: LmmDataset) -> np.ndarray:
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise RankError(
            "X'V^{-1}X is singular; offending columns: "
            + ", ".join(_collinear_columns(A))
        ) from None
    ident = np.eye(A.shape[0])
    ci = np.linalg.solve(c, ident)
    return ci.T @ ci


def _collinear_columns(A: np.ndarray) -> list[str]:
    vals, vecs = np.linalg.eigh(A)
    null = vecs[:, np.argmin(vals)]
    heavy = np.flatnonzero(np.abs(null) > 0.3 * np.abs(null).max())
    return [f"x{j}" for j in heavy]


def reml_workspace(dataset: LmmDataset, struct: CovarianceStructure, delta) -> RemlWorkspace:
    """Materialize the dense projector P and full dV matrices."""
    ws = block_workspace(dataset, struct, delta)
    n = dataset.n
    p = dataset.p
    off = dataset.offsets()
    vinv_full = np.zeros((n, n))
    vx = np.zeros((n, p))
    for i, b in enumerate(dataset.blocks):
        sl = slice(off[i], off[i + 1])
        vinv_full[sl, sl] = ws.vinv[i]
        vx[sl] = ws.vinv[i] @ b.X
    P = vinv_full - vx @ ws.a_inv @ vx.T
    dv_full = []
    for e in range(struct.n_params):
        dV = np.zeros((n, n))
        for i in range(dataset.m):
            sl = slice(off[i], off[i + 1])
            dV[sl, sl] = ws.dv[i][e]
        dv_full.append(dV)
    return RemlWorkspace(delta=ws.delta, P=P, dv_full=dv_full)


def gls_beta(dataset: LmmDataset, struct: CovarianceStructure, delta):
    """Generalized least squares: ``beta_hat(delta)`` and ``(X'V^{-1}X)^{-1}``."""
    ws = block_workspace(dataset, struct, delta)
    return ws.a_inv @ ws.xtvy, ws.a_inv


def restricted_loglik(dataset: LmmDataset, struct: CovarianceStructure, delta) -> float:
    """Restricted log-likelihood up to its additive constant."""
    ws = block_workspace(dataset, struct, delta)
    ypy = ws.quad_y - float(ws.xtvy @ (ws.a_inv @ ws.xtvy))
    return -0.5 * ws.logdet_v - 0.5 * logdet_spd(ws.A) - 0.5 * ypy


def _py_blocks(dataset: LmmDataset, ws: BlockWorkspace) -> list[np.ndarray]:
    beta_aux = ws.a_inv @ ws.xtvy
    out = []
    for i, b in enumerate(dataset.blocks):
        out.append(ws.vinv[i] @ (b.y - b.X @ beta_aux))
    return out


def _tr_p_dv(dataset: LmmDataset, ws: BlockWorkspace, e: int) -> float:
    """tr(P dV_e) accumulated blockwise."""
    t = 0.0
    corr = np.zeros_like(ws.A)
    for i, b in enumerate(dataset.blocks):
        bie = ws.vinv[i] @ ws.dv[i][e]
        t += float(np.trace(bie))
        vx = ws.vinv[i] @ b.X
        corr += vx.T @ (ws.dv[i][e] @ vx)
    return t - float(np.sum(ws.a_inv * corr.T))


def reml_score(dataset: LmmDataset, struct: CovarianceStructure, delta, ws=None) -> np.ndarray:
    """Score of the restricted log-likelihood,
    ``s_e = -1/2 tr(P dV_e) + 1/2 (Py)' dV_e (Py)``."""
    if ws is None:
        ws = block_workspace(dataset, struct, delta)
    r = struct.n_params
    py = _py_blocks(dataset, ws)
    s = np.zeros(r)
    for e in range(r):
        quad = sum(float(py[i] @ (ws.dv[i][e] @ py[i])) for i in range(dataset.m))
        s[e] = -0.5 * _tr_p_dv(dataset, ws, e) + 0.5 * quad
    return s


def reml_fisher_info(dataset: LmmDataset, struct: CovarianceStructure, delta, ws=None) -> np.ndarray:
    """Fisher information of delta,
    ``(Vbar^{-1})_{ef} = 1/2 tr(P dV_f P dV_e)``, accumulated blockwise."""
    if ws is None:
        ws = block_workspace(dataset, struct, delta)
    r = struct.n_params
    p = dataset.p
    t1 = np.zeros((r, r))
    m_acc = [np.zeros((p, p)) for _ in range(r)]
    n_acc = [[np.zeros((p, p)) for _ in range(r)] for _ in range(r)]
    for i, b in enumerate(dataset.blocks):
        vx = ws.vinv[i] @ b.X
        bie = [ws.vinv[i] @ ws.dv[i][e] for e in range(r)]
        for e in range(r):
            m_acc[e] += b.X.T @ (bie[e] @ vx)
            for f in range(e, r):
                t1[e, f] += float(np.sum(bie[e].T * bie[f]))
                n_acc[e][f] += vx.T @ (ws.dv[i][e] @ (bie[f] @ vx))
    info = np.zeros((r, r))
    for e in range(r):
        for f in range(e, r):
            t2 = float(np.sum(ws.a_inv * n_acc[e][f].T))
            t3 = float(np.sum((ws.a_inv @ m_acc[e]) * (ws.a_inv @ m_acc[f]).T))
            info[e, f] = info[f, e] = 0.5 * (t1[e, f] - 2.0 * t2 + t3)
    return info


def fisher_info_derivative(
    dataset: LmmDataset, struct: CovarianceStructure, delta, g: int,
    workspace: Optional[RemlWorkspace] = None,
) -> np.ndarray:
    """Derivative of the Fisher information,
    ``d(Vbar^{-1})_{ef}/ddelta_g = -tr(P dV_e P dV_f P dV_g)``.

    Requires a structure linear in delta (second derivatives of V vanish).
    """
    if not struct.linear_in_delta:
        raise NumericError("information derivative requires a structure linear in delta")
    if workspace is None:
        workspace = reml_workspace(dataset, struct, delta)
    r = struct.n_params
    P = workspace.P
    pdv = [P @ dV for dV in workspace.dv_full]
    out = np.zeros((r, r))
    pdv_g = pdv[g]
    for e in range(r):
        for f in range(e, r):
            val = -float(np.sum((pdv[e] @ pdv[f]).T * pdv_g))
            out[e, f] = out[f, e] = val
    return out


def known_fit(dataset: LmmDataset, struct: CovarianceStructure, delta) -> VarianceFit:
    """Wrap a known delta as a fit: GLS beta, zero estimation uncertainty."""
    delta = struct.check_delta(delta)
    beta, a_inv = gls_beta(dataset, struct, delta)
    r = struct.n_params
    return VarianceFit(
        delta_hat=VarianceParams(delta),
        beta_hat=beta,
        vbar=np.zeros((r, r)),
        method="known",
        iterations=0,
        converged=True,
        boundary_flags=np.zeros(r, dtype=bool),
        beta_cov=a_inv,
    )


def _default_start(dataset: LmmDataset, struct: CovarianceStructure) -> np.ndarray:
    """Equal split of the OLS residual variance across components."""
    X = dataset.stacked_x()
    y = dataset.stacked_y()
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    denom = max(dataset.n - dataset.p, 1)
    total = float(resid @ resid) / denom
    r = struct.n_params
    return np.full(r, max(total / r, 1e-4))


def fit_reml(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    start=None,
    tol: float = REML_TOL,
    max_iter: int = REML_MAX_ITER,
    floor: float = DELTA_FLOOR,
    max_halvings: int = REML_MAX_HALVINGS,
) -> VarianceFit:
    """Fisher scoring for the REML estimate of delta.

    Iterates ``delta <- delta + Vbar s(delta)`` with step halving until
    the (boundary-adjusted) score is below ``tol`` in max norm.
    Components pinned at the floor are flagged; non-convergence is
    reported through ``converged=False``, never silently.
    """
    delta = np.maximum(
        np.asarray(start, dtype=float) if start is not None else _default_start(dataset, struct),
        floor,
    )
    r = struct.n_params
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        ws = block_workspace(dataset, struct, delta)
        s = reml_score(dataset, struct, delta, ws=ws)
        # KKT view of the boundary: a floored component pushing outward counts
        # as stationary.
        pinned = (delta <= floor * (1 + 1e-12)) & (s < 0)
        s_eff = np.where(pinned, 0.0, s)
        if np.max(np.abs(s_eff)) < tol:
            converged = True
            break
        info = reml_fisher_info(dataset, struct, delta, ws=ws)
        # Projected scoring: pinned components stay put, the step solves the
        # reduced system so the free directional derivative is positive.
        free = ~pinned
        step = np.zeros(r)
        sub = info[np.ix_(free, free)]
        try:
            step[free] = np.linalg.solve(sub, s[free])
        except np.linalg.LinAlgError:
            warnings.warn("singular Fisher information; using pseudo-inverse", RuntimeWarning)
            step[free] = np.linalg.pinv(sub) @ s[free]
        ll0 = _loglik_from_ws(ws)
        scale = 1.0
        accepted = False
        for _ in range(max_halvings + 1):
            cand = np.maximum(delta + scale * step, floor)
            try:
                ll = restricted_loglik(dataset, struct, cand)
            except (DegenerateCovarianceError, RankError):
                ll = -np.inf
            if ll > ll0 - 1e-12 and np.isfinite(ll):
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        if np.max(np.abs(cand - delta)) == 0.0:
            break
        delta = cand
    ws = block_workspace(dataset, struct, delta)
    if not converged:
        # Loop may exit through a zero-move or failed-halving break right at
        # the boundary; re-check stationarity at the final point.
        s = reml_score(dataset, struct, delta, ws=ws)
        s_eff = np.where((delta <= floor * (1 + 1e-12)) & (s < 0), 0.0, s)
        converged = bool(np.max(np.abs(s_eff)) < tol)
    info = reml_fisher_info(dataset, struct, delta, ws=ws)
    boundary = delta <= floor * (1 + 1e-12)
    try:
        vbar = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        warnings.warn("singular Fisher information at the optimum; using pseudo-inverse",
                      RuntimeWarning)
        vbar = np.linalg.pinv(info)
        boundary = boundary | ~np.isfinite(np.diag(vbar))
    vbar = 0.5 * (vbar + vbar.T)
    beta = ws.a_inv @ ws.xtvy
    return VarianceFit(
        delta_hat=VarianceParams(delta),
        beta_hat=beta,
        vbar=vbar,
        method="reml",
        iterations=iterations,
        converged=converged,
        boundary_flags=boundary,
        beta_cov=ws.a_inv,
    )


def _loglik_from_ws(ws: BlockWorkspace) -> float:
    ypy = ws.quad_y - float(ws.xtvy @ (ws.a_inv @ ws.xtvy))
    return -0.5 * ws.logdet_v - 0.5 * logdet_spd(ws.A) - 0.5 * ypy


# ---------------------------------------------------------------------------
# Henderson III (nested error regression only)
# ---------------------------------------------------------------------------


@dataclass
class CeOperators:
    """Matrix-free appliers for the Henderson III quadratic forms.

    ``apply(e, v)`` computes ``C_e v`` (also for matrix right-hand
    sides); ``dense(e)`` materializes the n x n matrix.
    """

    dataset: LmmDataset = field(repr=False)
    _x: np.ndarray = field(repr=False, default=None)
    _z: np.ndarray = field(repr=False, default=None)
    _xtx_inv: np.ndarray = field(repr=False, default=None)
    _mtm_inv: np.ndarray = field(repr=False, default=None)
    _m_mat: np.ndarray = field(repr=False, default=None)
    trace_scale: float = 0.0
    df_error: int = 0

    def __post_init__(self):
        ds = self.dataset
        X = ds.stacked_x()
        Z = ds.stacked_z()
        M = np.hstack([X, Z])
        n, p, m = ds.n, ds.p, ds.m
        if n - p - m <= 0 or np.linalg.matrix_rank(M) < p + m:
            raise RankError(
                "Henderson III needs rank(X, Z) = p + m; drop the intercept "
                "(it is collinear with the cluster dummies) or use REML"
            )
        self._x, self._z, self._m_mat = X, Z, M
        self._xtx_inv = np.linalg.inv(X.T @ X)
        self._mtm_inv = np.linalg.inv(M.T @ M)
        self.df_error = n - p - m
        qx_z = Z - X @ (self._xtx_inv @ (X.T @ Z))
        self.trace_scale = float(np.sum(Z * qx_z))

    def apply(self, e: int, v: np.ndarray) -> np.ndarray:
        """Apply C_e; e=0 targets sigma_v^2, e=1 targets sigma_e^2."""
        if e == 1:
            Mv = self._m_mat @ (self._mtm_inv @ (self._m_mat.T @ v))
            return (v - Mv) / self.df_error
        n, p = self.dataset.n, self.dataset.p
        Xv = self._x @ (self._xtx_inv @ (self._x.T @ v))
        return (v - Xv - (n - p) * self.apply(1, v)) / self.trace_scale

    def dense(self, e: int) -> np.ndarray:
        return self.apply(e, np.eye(self.dataset.n))


def extract_ce(dataset: LmmDataset) -> CeOperators:
    """Quadratic-form operators of Henderson III for the NER model."""
    return CeOperators(dataset=dataset)


def fit_henderson3_ner(dataset: LmmDataset) -> VarianceFit:
    """Henderson III for the NER model: ``delta_e = y'C_e y`` closed forms.

    A negative raw ``sigma_v^2`` is truncated at zero and flagged.  The
    attached ``vbar`` is the conditional covariance of the quadratic
    forms, ``2 tr(C_e R C_f R) + 4 mu' C_e R C_f mu`` at plug-in
    estimates of ``R`` and ``mu = X beta + Z v``.
    """
    ce = extract_ce(dataset)
    y = dataset.stacked_y()
    # y'C_2 y is a scaled squared norm; tiny negatives are pure roundoff.
    se2 = max(float(y @ ce.apply(1, y)), 0.0)
    sv2_raw = float(y @ ce.apply(0, y))
    sv2 = max(sv2_raw, 0.0)
    boundary = np.array([sv2_raw < 0.0, False])
    delta = np.array([sv2, se2])

    struct = ner_structure(dataset.sizes)
    # Residual-free data give se2 = 0 exactly; the plug-in GLS and
    # quadratic-form covariance still need an invertible R.
    plug = np.array([sv2, max(se2, 1e-12)])
    beta, a_inv = gls_beta(dataset, struct, plug)
    # Plug-in conditional mean X beta + Z v_hat with the effect predictor
    # v_hat_i = gamma_i (ybar_i - xbar_i' beta).
    mu = np.empty(dataset.n)
    off = dataset.offsets()
    for i, b in enumerate(dataset.blocks):
        gamma = b.n * sv2 / (se2 + b.n * sv2) if (se2 + b.n * sv2) > 0 else 0.0
        v_hat = gamma * float(np.mean(b.y - b.X @ beta))
        mu[off[i]: off[i + 1]] = b.X @ beta + v_hat

    c_dense = [ce.dense(0), ce.dense(1)]
    vbar = np.zeros((2, 2))
    for e in range(2):
        for f in range(e, 2):
            # R = se2 * I, so C_e R C_f R = se2^2 C_e C_f.
            tr_term = 2.0 * se2**2 * float(np.sum(c_dense[e] * c_dense[f].T))
            mean_term = 4.0 * se2 * float(mu @ (c_dense[e] @ (c_dense[f] @ mu)))
            vbar[e, f] = vbar[f, e] = tr_term + mean_term
    return VarianceFit(
        delta_hat=VarianceParams(delta),
        beta_hat=beta,
        vbar=vbar,
        method="henderson3",
        iterations=0,
        converged=True,
        boundary_flags=boundary,
        beta_cov=a_inv,
    )
