"""Covariance estimators for the prediction error of the mixed targets.

Marginal law:  Sigma_hat = K1 + K2 + 2*K3_hat, where K1 is the
no-estimation variance of the weighted cluster predictor, K2 the
contribution of the fixed-effect estimate (the only off-diagonal part)
and K3_hat the delta-estimation correction.

Conditional law (realized effects held fixed):
Sigma_v_hat = L1 + L2 + L3_hat + L4_hat - L5_hat, with L3_hat the
cross-covariance correction in a REML variant (projector-based traces)
and a Henderson III variant (quadratic-form operators), L4_hat the pure
delta-noise term and L5_hat a plug-in bias correction of L1.  The
estimator is symmetrized and PSD-clamped; its noncentrality companion

    lambda_hat = max(0, ||S^{-1/2}Ay||^2 - ||S^{-1/2}A R^{1/2}||_F^2
                        - ||S^{-1/2}A X beta||^2)

estimates the squared standardized conditional bias.  The middle term
uses the positive half power of R: the defining property of the
estimator is that the noise part of ||S^{-1/2}Ay||^2 has expectation
tr(A'S^{-1}A R), which is exactly that Frobenius norm.

Entries of the correction terms carry plug-in weights w_i with
``w_i'e = mu_i~ - E(mu_i~ | v)``: the i-th block holds b_i and the rest
is the global GLS leverage term.

Implementation note: every matrix in this model class is block diagonal
except the rank-p GLS correction, so the projector products reduce to
per-block traces and p x p accumulations; nothing here materializes an
n x n matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimation import (
    VarianceFit,
    block_workspace,
    extract_ce,
)
from .exceptions import NumericError, RankError, StructuralError
from .linalg import sym_sqrt
from .model import CovarianceStructure, LmmDataset, MixedTargets
from .prediction import blup_components

__all__ = [
    "CovEstimate",
    "AMatrix",
    "k1",
    "k2",
    "k3_hat",
    "sigma_marginal",
    "l1",
    "l2",
    "l3_hat_reml",
    "l3_hat_h3",
    "l4_hat",
    "l5_hat",
    "sigma_conditional",
    "a_matrix",
    "lambda_hat",
    "CovContext",
]

PSD_CLAMP = 1e-10
PSD_FILL = 1e-12


@dataclass(frozen=True)
class CovEstimate:
    """An m x m covariance estimate with its assembly components.

    ``components`` always sum to ``sigma`` bitwise; when PSD clamping
    fired, the shift is recorded as the component ``"psd_adjust"``.
    ``components["L5"]`` stores the signed (subtracted) contribution.
    """

    sigma: np.ndarray
    law: str  # "marginal" | "conditional"
    lambda_hat: Optional[float]
    components: dict[str, np.ndarray]
    delta_used: np.ndarray
    method: str

    @property
    def m(self) -> int:
        return self.sigma.shape[0]


@dataclass(frozen=True)
class AMatrix:
    """Joint bias map ``a_i`` (rows of ``a``) and noise maps ``w_i`` (rows of ``w``).

    ``a @ (Z v)`` is the conditional bias of the BLUP vector;
    ``w @ e`` is its conditional noise.
    """

    a: np.ndarray  # (m, n)
    w: np.ndarray  # (m, n)


class CovContext:
    """Shared per-delta quantities for the covariance terms."""

    def __init__(self, dataset: LmmDataset, struct: CovarianceStructure,
                 targets: MixedTargets, delta):
        delta = struct.check_delta(delta)
        self.dataset = dataset
        self.struct = struct
        self.targets = targets
        self.delta = delta
        self.ws = block_workspace(dataset, struct, delta)
        self.comp = blup_components(dataset, struct, targets, delta, ws=self.ws)
        self.m, self.n, self.p, self.r = dataset.m, dataset.n, dataset.p, struct.n_params
        self.off = dataset.offsets()
        self.G = struct.g_of(delta)
        self.R = [struct.r_of(delta, i) for i in range(self.m)]
        self.dR = [[struct.dr(delta, i, e) for e in range(self.r)] for i in range(self.m)]
        self.D = self.comp.d  # (m, p)
        self._t_blocks = None
        self._dt = None
        self._d2t = None
        self._d2b = None
        self._w = None
        self._dw = None
        self._d2w = None
        self._tau = None

    # -- building blocks ---------------------------------------------------

    @property
    def t_blocks(self) -> np.ndarray:
        """Stacked T = V^{-1} X (X'V^{-1}X)^{-1}, shape (n, p)."""
        if self._t_blocks is None:
            T = np.empty((self.n, self.p))
            for i, b in enumerate(self.dataset.blocks):
                T[self.off[i]: self.off[i + 1]] = self.ws.vinv[i] @ b.X @ self.ws.a_inv
            self._t_blocks = T
        return self._t_blocks

    def _a_prime(self, e: int) -> np.ndarray:
        acc = np.zeros((self.p, self.p))
        for i, b in enumerate(self.dataset.blocks):
            vx = self.ws.vinv[i] @ b.X
            acc += vx.T @ (self.ws.dv[i][e] @ vx)
        return acc

    @property
    def dt(self) -> np.ndarray:
        """dT/ddelta_e, shape (r, n, p)."""
        if self._dt is None:
            r, n, p = self.r, self.n, self.p
            a_inv = self.ws.a_inv
            a_primes = [self._a_prime(e) for e in range(r)]
            self._a_primes = a_primes
            dt = np.empty((r, n, p))
            for e in range(r):
                corr = a_inv @ a_primes[e] @ a_inv
                for i, b in enumerate(self.dataset.blocks):
                    sl = slice(self.off[i], self.off[i + 1])
                    vx = self.ws.vinv[i] @ b.X
                    dt[e, sl] = -self.ws.vinv[i] @ (self.ws.dv[i][e] @ (vx @ a_inv)) + vx @ corr
            self._dt = dt
        return self._dt

    def _a_second(self, e: int, d: int) -> np.ndarray:
        acc = np.zeros((self.p, self.p))
        for i, b in enumerate(self.dataset.blocks):
            vinv = self.ws.vinv[i]
            vx = vinv @ b.X
            med = vinv @ (self.ws.dv[i][e] @ (vinv @ (self.ws.dv[i][d] @ vx)))
            mde = vinv @ (self.ws.dv[i][d] @ (vinv @ (self.ws.dv[i][e] @ vx)))
            acc -= b.X.T @ (med + mde)
        return acc

    @property
    def d2t(self) -> dict:
        """d^2 T / ddelta_e ddelta_d for e <= d, each (n, p)."""
        if self._d2t is None:
            _ = self.dt
            a_inv = self.ws.a_inv
            a_primes = self._a_primes
            out = {}
            for e in range(self.r):
                for d in range(e, self.r):
                    second = np.zeros((self.n, self.p))
                    d_ainv_e = a_inv @ a_primes[e] @ a_inv
                    d_ainv_d = a_inv @ a_primes[d] @ a_inv
                    d2_ainv = (a_inv @ a_primes[d] @ d_ainv_e
                               + a_inv @ a_primes[e] @ d_ainv_d
                               + a_inv @ self._a_second(e, d) @ a_inv)
                    for i, b in enumerate(self.dataset.blocks):
                        sl = slice(self.off[i], self.off[i + 1])
                        vinv = self.ws.vinv[i]
                        vx = vinv @ b.X
                        dve, dvd = self.ws.dv[i][e], self.ws.dv[i][d]
                        d2vx = (vinv @ (dvd @ (vinv @ (dve @ vx)))
                                + vinv @ (dve @ (vinv @ (dvd @ vx))))
                        dvx_e = -vinv @ (dve @ vx)
                        dvx_d = -vinv @ (dvd @ vx)
                        second[sl] = (d2vx @ a_inv
                                      + dvx_e @ d_ainv_d + dvx_d @ d_ainv_e
                                      + vx @ d2_ainv)
                    out[(e, d)] = second
            self._d2t = out
        return self._d2t

    @property
    def d2b(self) -> list:
        """Second derivatives of the BLUP weights, each (n_i, r, r)."""
        if self._d2b is None:
            if not self.struct.linear_in_delta:
                raise NumericError(
                    "second-order weight derivatives need a structure linear in delta")
            out = []
            for i, blk in enumerate(self.dataset.blocks):
                vinv = self.ws.vinv[i]
                b = self.comp.b[i]
                u = [blk.Z @ (self.struct.dg(self.delta, e) @ self.targets.h[i])
                     for e in range(self.r)]
                arr = np.empty((blk.n, self.r, self.r))
                for e in range(self.r):
                    for d in range(e, self.r):
                        dve, dvd = self.ws.dv[i][e], self.ws.dv[i][d]
                        val = (-vinv @ (dvd @ (vinv @ u[e]))
                               - vinv @ (dve @ (vinv @ u[d]))
                               + vinv @ (dvd @ (vinv @ (dve @ b)))
                               + vinv @ (dve @ (vinv @ (dvd @ b))))
                        arr[:, e, d] = arr[:, d, e] = val
                out.append(arr)
            self._d2b = out
        return self._d2b

    @property
    def w(self) -> np.ndarray:
        """Noise maps w_i as rows, (m, n)."""
        if self._w is None:
            W = self.D @ self.t_blocks.T
            for i in range(self.m):
                W[i, self.off[i]: self.off[i + 1]] += self.comp.b[i]
            self._w = W
        return self._w

    @property
    def dw(self) -> np.ndarray:
        """dW/ddelta_e, (r, m, n)."""
        if self._dw is None:
            r = self.r
            dd = np.empty((r, self.m, self.p))
            for e in range(r):
                for i, blk in enumerate(self.dataset.blocks):
                    dd[e, i] = -blk.X.T @ self.comp.db[i][:, e]
            self._dd = dd
            out = np.empty((r, self.m, self.n))
            for e in range(r):
                out[e] = dd[e] @ self.t_blocks.T + self.D @ self.dt[e].T
                for i in range(self.m):
                    out[e, i, self.off[i]: self.off[i + 1]] += self.comp.db[i][:, e]
            self._dw = out
        return self._dw

    @property
    def d2w(self) -> dict:
        """d^2 W / ddelta_e ddelta_d for e <= d, each (m, n)."""
        if self._d2w is None:
            _ = self.dw
            dd = self._dd
            d2b = self.d2b
            out = {}
            for e in range(self.r):
                for d in range(e, self.r):
                    d2d = np.empty((self.m, self.p))
                    for i, blk in enumerate(self.dataset.blocks):
                        d2d[i] = -blk.X.T @ d2b[i][:, e, d]
                    mat = (d2d @ self.t_blocks.T
                           + dd[e] @ self.dt[d].T + dd[d] @ self.dt[e].T
                           + self.D @ self.d2t[(e, d)].T)
                    for i in range(self.m):
                        mat[i, self.off[i]: self.off[i + 1]] += d2b[i][:, e, d]
                    out[(e, d)] = mat
            self._d2w = out
        return self._d2w

    def right_r(self, M: np.ndarray) -> np.ndarray:
        """Multiply columns by the block-diagonal R: returns M @ R."""
        out = np.empty_like(M)
        for i in range(self.m):
            sl = slice(self.off[i], self.off[i + 1])
            out[..., sl] = M[..., sl] @ self.R[i]
        return out

    def right_p(self, M: np.ndarray) -> np.ndarray:
        """Multiply columns by the REML projector: returns M @ P.

        P = V^{-1} - T A T' (block diagonal minus rank p), so this never
        forms P itself.
        """
        out = np.empty_like(M)
        for i in range(self.m):
            sl = slice(self.off[i], self.off[i + 1])
            out[..., sl] = M[..., sl] @ self.ws.vinv[i]
        out -= ((M @ self.t_blocks) @ self.ws.A) @ self.t_blocks.T
        return out

    def sandwich_dv(self, left: np.ndarray, e: int, right: np.ndarray) -> np.ndarray:
        """``sum_blocks left[:, b] @ dV_e[b] @ right[:, b]'`` for row-stacked maps."""
        out = np.zeros((left.shape[0], right.shape[0]))
        for i in range(self.m):
            sl = slice(self.off[i], self.off[i + 1])
            out += left[:, sl] @ self.ws.dv[i][e] @ right[:, sl].T
        return out

    @property
    def tau(self) -> np.ndarray:
        """tau[e,f,g] = tr(P dV_e P dV_f P dV_g), fully symmetric.

        Expanding P = B - C with B the block-diagonal V^{-1} and C = U U'
        of rank p turns every term into per-block traces or p x p
        products:

            tau = S3(e,f,g)
                  - tr E3(e,f,g) - tr E3(f,g,e) - tr E3(g,e,f)
                  + tr(E1_e E2(f,g)) + tr(E2(e,f) E1_g) + tr(E1_f E2(g,e))
                  - tr(E1_e E1_f E1_g),

        with E1_e = U'D_eU, E2(e,f) = U'D_e B D_f U,
        E3(e,f,g) = U'D_e B D_f B D_g U and S3 the pure block part.
        """
        if self._tau is not None:
            return self._tau
        r, p = self.r, self.p
        chol_a = np.linalg.cholesky(self.ws.A)
        U = self.t_blocks @ chol_a
        e1 = np.zeros((r, p, p))
        e2 = np.zeros((r, r, p, p))
        e3 = np.zeros((r, r, r, p, p))
        s3 = np.zeros((r, r, r))
        for i in range(self.m):
            ui = U[self.off[i]: self.off[i + 1]]
            dv = self.ws.dv[i]
            vinv = self.ws.vinv[i]
            du = [dv[e] @ ui for e in range(r)]          # D_e U
            bdu = [vinv @ du[e] for e in range(r)]       # B D_e U
            bd = [vinv @ dv[e] for e in range(r)]        # B D_e
            for e in range(r):
                e1[e] += ui.T @ du[e]
                for f in range(r):
                    e2[e, f] += du[e].T @ bdu[f]
                    for g in range(r):
                        e3[e, f, g] += du[e].T @ (vinv @ (dv[f] @ bdu[g]))
            for e in range(r):
                for f in range(e, r):
                    prod_ef = bd[e] @ bd[f]
                    for g in range(f, r):
                        val = float(np.sum(prod_ef * bd[g].T))
                        for idx in {(e, f, g), (e, g, f), (f, e, g),
                                    (f, g, e), (g, e, f), (g, f, e)}:
                            s3[idx] += val
        tau = np.array(s3)
        for e in range(r):
            for f in range(r):
                for g in range(r):
                    tau[e, f, g] -= (np.trace(e3[e, f, g]) + np.trace(e3[f, g, e])
                                     + np.trace(e3[g, e, f]))
                    tau[e, f, g] += (float(np.sum(e1[e] * e2[f, g].T))
                                     + float(np.sum(e2[e, f] * e1[g].T))
                                     + float(np.sum(e1[f] * e2[g, e].T)))
                    tau[e, f, g] -= float(np.sum((e1[e] @ e1[f]) * e1[g].T))
        self._tau = tau
        return tau


# ---------------------------------------------------------------------------
# Marginal-law terms
# ---------------------------------------------------------------------------


def k1(ctx: CovContext) -> np.ndarray:
    """diag[ h_i'{G - G Z_i'V_i^{-1}Z_i G} h_i ]."""
    vals = np.empty(ctx.m)
    for i, blk in enumerate(ctx.dataset.blocks):
        gh = ctx.G @ ctx.targets.h[i]
        u = blk.Z @ gh
        vals[i] = float(ctx.targets.h[i] @ gh - u @ (ctx.ws.vinv[i] @ u))
    return np.diag(vals)


def k2(ctx: CovContext) -> np.ndarray:
    """Gram matrix of the d_i in the (X'V^{-1}X)^{-1} metric; rank <= p."""
    return ctx.D @ ctx.ws.a_inv @ ctx.D.T


def k3_hat(ctx: CovContext, vbar: np.ndarray) -> np.ndarray:
    """diag[ tr{(db_i'/ddelta) V_i (db_i/ddelta') Vbar} ]."""
    vals = np.empty(ctx.m)
    for i, blk in enumerate(ctx.dataset.blocks):
        V = ctx.R[i] + blk.Z @ ctx.G @ blk.Z.T
        inner = ctx.comp.db[i].T @ V @ ctx.comp.db[i]
        vals[i] = float(np.sum(inner * vbar.T))
    return np.diag(vals)


# ---------------------------------------------------------------------------
# Conditional-law terms
# ---------------------------------------------------------------------------


def l1(ctx: CovContext) -> np.ndarray:
    """diag[ b_i' R_i b_i ]: conditional variance of the fixed-beta predictor."""
    vals = np.array([float(ctx.comp.b[i] @ (ctx.R[i] @ ctx.comp.b[i]))
                     for i in range(ctx.m)])
    return np.diag(vals)


def l2(ctx: CovContext) -> np.ndarray:
    """Conditional covariance added by the GLS fixed-effect estimate."""
    # Rows q_k' = b_k' K_k with K_k = R_k V_k^{-1} X_k (X'V^{-1}X)^{-1}.
    Q = np.empty((ctx.m, ctx.p))
    phi = np.zeros((ctx.p, ctx.p))
    for i in range(ctx.m):
        t_i = ctx.t_blocks[ctx.off[i]: ctx.off[i + 1]]
        rt = ctx.R[i] @ t_i
        Q[i] = ctx.comp.b[i] @ rt
        phi += t_i.T @ rt
    m1 = ctx.D @ Q.T  # (i, k) = d_i' K_k' b_k
    return m1 + m1.T + ctx.D @ phi @ ctx.D.T


def l4_hat(ctx: CovContext, vbar: np.ndarray) -> np.ndarray:
    """diag[ tr{(db_i'/ddelta) R_i (db_i/ddelta') Vbar} ]."""
    vals = np.empty(ctx.m)
    for i in range(ctx.m):
        inner = ctx.comp.db[i].T @ ctx.R[i] @ ctx.comp.db[i]
        vals[i] = float(np.sum(inner * vbar.T))
    return np.diag(vals)


def l5_hat(ctx: CovContext, vbar: np.ndarray) -> np.ndarray:
    """Plug-in bias correction of L1: half-trace of its delta-Hessian times Vbar."""
    d2b = ctx.d2b
    vals = np.empty(ctx.m)
    for i in range(ctx.m):
        b = ctx.comp.b[i]
        db = ctx.comp.db[i]
        R = ctx.R[i]
        H = np.empty((ctx.r, ctx.r))
        for e in range(ctx.r):
            for d in range(e, ctx.r):
                val = (2.0 * float(d2b[i][:, e, d] @ (R @ b))
                       + 2.0 * float(db[:, e] @ (ctx.dR[i][d] @ b))
                       + 2.0 * float(db[:, d] @ (ctx.dR[i][e] @ b))
                       + 2.0 * float(db[:, e] @ (R @ db[:, d])))
                H[e, d] = H[d, e] = val
        vals[i] = 0.5 * float(np.sum(H * vbar.T))
    return np.diag(vals)


def l3_hat_reml(ctx: CovContext, vbar: np.ndarray) -> np.ndarray:
    """REML variant of the cross-covariance correction (projector traces).

    Entry (i, k) estimates the symmetrized cross term; the four parts are
    the first-order score term, the curvature (second-derivative) term,
    and the two higher-order information-derivative terms, which are
    algebraic negatives of each other under the tensor-consistent
    contraction and are kept for component-level diagnostics.
    """
    if not ctx.struct.linear_in_delta:
        raise NumericError("the REML L3 correction requires linearity in delta")
    r = ctx.r
    WR = ctx.right_r(ctx.w)
    DWR = ctx.right_r(ctx.dw)
    WRP = ctx.right_p(WR)

    # Term 1: 2 sum_e tr{P dV_e P R w_i (Vbar)_e'(dw_k'/ddelta) R}.
    term1 = np.zeros((ctx.m, ctx.m))
    for e in range(r):
        u_e = np.einsum("f,fkn->kn", vbar[:, e], DWR)
        term1 += ctx.sandwich_dv(WRP, e, ctx.right_p(u_e))
    term1 *= 2.0

    # Term 2: sum_{e,d} Vbar_{ed} w_i' R d2w_k/(ddelta_e ddelta_d).
    d2w = ctx.d2w
    term2 = np.zeros((ctx.m, ctx.m))
    for e in range(r):
        for d in range(e, r):
            mult = 1.0 if e == d else 2.0
            term2 += mult * vbar[e, d] * (WR @ d2w[(e, d)].T)

    # Terms 3 and 4: information-derivative corrections with weights
    # kappa_e = sum_f Vbar_{ef} sum_{g,h} tau(f,g,h) Vbar_{gh}; they enter
    # with opposite signs and cancel exactly.
    kappa = vbar @ np.einsum("fgh,gh->f", ctx.tau, vbar)
    base = np.zeros((ctx.m, ctx.m))
    for e in range(r):
        base += kappa[e] * (WR @ ctx.dw[e].T)
    term3 = 2.0 * base
    term4 = -2.0 * base
    return term1 + term2 + term3 + term4


def l3_hat_h3(ctx: CovContext, vbar: np.ndarray, ce=None) -> np.ndarray:
    """Henderson III variant of the cross-covariance correction.

    Uses the quadratic-form operators C_e; the first part carries the
    exact fourth-moment coefficient for the symmetrized cross term, the
    second is the shared curvature term.
    """
    if not ctx.struct.linear_in_delta:
        raise NumericError("the Henderson L3 correction requires linearity in delta")
    if ce is None:
        ce = extract_ce(ctx.dataset)
    r = ctx.r
    WR = ctx.right_r(ctx.w)
    DWR = ctx.right_r(ctx.dw)
    term1 = np.zeros((ctx.m, ctx.m))
    for e in range(r):
        term1 += (ce.apply(e, WR.T).T) @ DWR[e].T
    term1 *= 4.0
    d2w = ctx.d2w
    term2 = np.zeros((ctx.m, ctx.m))
    for e in range(r):
        for d in range(e, r):
            mult = 1.0 if e == d else 2.0
            term2 += mult * vbar[e, d] * (WR @ d2w[(e, d)].T)
    return term1 + term2


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def _clamp_psd(total: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetrize and lift tiny negative eigenvalues; reject real indefiniteness."""
    sym = 0.5 * (total + total.T)
    vals, vecs = np.linalg.eigh(sym)
    scale = max(float(np.abs(vals).max()), 1e-300)
    if vals.min() < -PSD_CLAMP * scale:
        raise NumericError(
            "covariance estimate is indefinite beyond the clamp tolerance; "
            f"eigenvalues: min={vals.min():.6e}, max={vals.max():.6e}"
        )
    if vals.min() > PSD_FILL * scale:
        return sym, np.zeros_like(sym)
    lifted = np.maximum(vals, PSD_FILL * scale)
    clamped = (vecs * lifted) @ vecs.T
    clamped = 0.5 * (clamped + clamped.T)
    return clamped, clamped - sym


def sigma_marginal(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    targets: MixedTargets,
    fit: VarianceFit,
) -> CovEstimate:
    """Marginal covariance estimate K1 + K2 + 2*K3_hat.

    With a known delta (``fit.method == "known"``) the estimation
    correction drops and the exact K1 + K2 is returned.
    """
    ctx = CovContext(dataset, struct, targets, fit.delta)
    comps = {"K1": k1(ctx), "K2": k2(ctx)}
    if fit.method == "known":
        comps["2K3"] = np.zeros((ctx.m, ctx.m))
    else:
        comps["2K3"] = 2.0 * k3_hat(ctx, fit.vbar)
    total = comps["K1"] + comps["K2"] + comps["2K3"]
    sigma, _ = _clamp_psd(total)
    comps = {k: 0.5 * (v + v.T) for k, v in comps.items()}
    comps["psd_adjust"] = sigma - sum(comps.values())
    return CovEstimate(
        sigma=sigma, law="marginal", lambda_hat=None, components=comps,
        delta_used=ctx.delta, method=fit.method,
    )


def sigma_conditional(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    targets: MixedTargets,
    fit: VarianceFit,
    attach_lambda: bool = True,
    lambda_value: Optional[float] = None,
) -> CovEstimate:
    """Conditional covariance estimate with its noncentrality companion.

    The L3 variant follows ``fit.method``; with a known delta all
    estimation-noise terms drop and the exact L1 + L2 is returned.
    ``lambda_value`` overrides the estimate (oracle studies); with
    ``attach_lambda=False`` no noncentrality is attached.
    """
    ctx = CovContext(dataset, struct, targets, fit.delta)
    m = ctx.m
    comps = {"L1": l1(ctx), "L2": l2(ctx)}
    if fit.method == "known":
        comps["L3"] = np.zeros((m, m))
        comps["L4"] = np.zeros((m, m))
        comps["L5"] = np.zeros((m, m))
    elif fit.method == "reml":
        comps["L3"] = l3_hat_reml(ctx, fit.vbar)
        comps["L4"] = l4_hat(ctx, fit.vbar)
        comps["L5"] = -l5_hat(ctx, fit.vbar)
    elif fit.method == "henderson3":
        comps["L3"] = l3_hat_h3(ctx, fit.vbar)
        comps["L4"] = l4_hat(ctx, fit.vbar)
        comps["L5"] = -l5_hat(ctx, fit.vbar)
    else:
        raise StructuralError(f"unknown fit method {fit.method!r}")
    total = sum(comps.values())
    sigma, _ = _clamp_psd(total)
    comps = {k: 0.5 * (v + v.T) for k, v in comps.items()}
    comps["psd_adjust"] = sigma - sum(comps.values())
    lam = None
    if lambda_value is not None:
        lam = float(max(0.0, lambda_value))
    elif attach_lambda:
        amat = a_matrix(dataset, struct, targets, fit.delta, ctx=ctx)
        lam = lambda_hat(sigma, amat, dataset, struct, fit.beta_hat, fit.delta)
    return CovEstimate(
        sigma=sigma, law="conditional", lambda_hat=lam, components=comps,
        delta_used=ctx.delta, method=fit.method,
    )


def a_matrix(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    targets: MixedTargets,
    delta,
    ctx: Optional[CovContext] = None,
) -> AMatrix:
    """Joint bias and noise maps of the BLUP vector.

    ``a_i = (b_i'Z_i - h_i')(Z_i'Z_i)^{-1}Z_i'`` on block i plus the
    global GLS leverage ``d_i'(X'V^{-1}X)^{-1}X'V^{-1}``; the noise map
    ``w_i`` replaces the first part by ``b_i`` itself, so that
    ``w_i'e = mu_i~ - E(mu_i~ | v)`` exactly.
    """
    if ctx is None:
        ctx = CovContext(dataset, struct, targets, struct.check_delta(delta))
    a = ctx.D @ ctx.t_blocks.T
    w = ctx.w.copy()
    for i, blk in enumerate(dataset.blocks):
        ztz = blk.Z.T @ blk.Z
        try:
            coeff = np.linalg.solve(ztz, blk.Z.T @ ctx.comp.b[i] - targets.h[i])
        except np.linalg.LinAlgError:
            raise RankError(f"Z'Z is singular for cluster {blk.id!r}") from None
        a[i, ctx.off[i]: ctx.off[i + 1]] += blk.Z @ coeff
    return AMatrix(a=a, w=w)


def lambda_hat(
    sigma_v: np.ndarray | CovEstimate,
    amat: AMatrix,
    dataset: LmmDataset,
    struct: CovarianceStructure,
    beta: np.ndarray,
    delta,
    contrast: Optional[np.ndarray] = None,
) -> float:
    """Noncentrality estimate ``max(0, ||S^{-1/2}Ay||^2 - noise - 'signal')``.

    With ``contrast`` (a u x m matrix L), the same estimator for the
    transformed problem: A -> LA and S -> L Sigma_v L'.
    """
    delta = struct.check_delta(delta)
    sigma = sigma_v.sigma if isinstance(sigma_v, CovEstimate) else np.asarray(sigma_v)
    rows = amat.a
    if contrast is not None:
        contrast = np.atleast_2d(np.asarray(contrast, dtype=float))
        rows = contrast @ rows
        sigma = contrast @ sigma @ contrast.T
    _, inv_root = sym_sqrt(sigma)
    sa = inv_root @ rows
    y = dataset.stacked_y()
    x_beta = dataset.stacked_x() @ np.asarray(beta, dtype=float)
    t_data = float(np.sum((sa @ y) ** 2))
    t_mean = float(np.sum((sa @ x_beta) ** 2))
    t_noise = 0.0
    off = dataset.offsets()
    for i in range(dataset.m):
        R = struct.r_of(delta, i)
        root, _ = sym_sqrt(R)
        t_noise += float(np.sum((sa[:, off[i]: off[i + 1]] @ root) ** 2))
    return float(max(0.0, t_data - t_noise - t_mean))
