"""Confidence-set tests, Tukey screens, projection and coverage diagnostics.

Membership of the simultaneous sets is decided through the quadratic
form ``||cov^{-1/2}(mu_hat - mu0)||^2`` against a chi-square threshold:
central with ``m`` degrees of freedom under the marginal law,
non-central with the estimated noncentrality under the conditional law.
Linear hypotheses transform both the estimate and the covariance by the
contrast matrix; Tukey screens standardize simple contrasts by the sum
of positive entries of the contrast row of the covariance square root.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2 as _chi2
from scipy.stats import norm as _norm

from .covariance import AMatrix, CovContext, CovEstimate, a_matrix, k1, k2, l1, l2, lambda_hat
from .exceptions import (
    DegenerateCovarianceError,
    NothingToDoError,
    RankError,
    StructuralError,
)
from .linalg import solve_spd, sym_sqrt
from .model import CovarianceStructure, LmmDataset, MixedTargets
from .quantiles import (
    chi2_quantile,
    noncentral_chi2_cdf,
    noncentral_chi2_quantile,
    range_cdf,
    range_quantile,
)

__all__ = [
    "EllipsoidTest",
    "LinearHypothesis",
    "TukeyResult",
    "TukeyContrast",
    "ProjectionResult",
    "ConditionalContext",
    "ellipsoid_contains",
    "test_linear",
    "tukey_all_pairs",
    "tukey_interval",
    "project_onto_ellipsoid",
    "clusterwise_coverage_shift",
]

RANK_TOL = 1e-10


@dataclass(frozen=True)
class EllipsoidTest:
    """Outcome of one confidence-set membership check."""

    statistic: float
    threshold: float
    df: int
    noncentrality: float
    p_value: float
    reject: bool
    law: str


@dataclass(frozen=True)
class LinearHypothesis:
    """``H0: L(mu - a) = 0`` with a full-row-rank u x m matrix L."""

    L: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        a = np.asarray(self.a, dtype=float).ravel()
        if L.shape[1] != a.size:
            raise StructuralError("L and a disagree on the number of clusters")
        sv = np.linalg.svd(L, compute_uv=False)
        if L.shape[0] > L.shape[1] or sv.min() <= RANK_TOL * sv.max():
            raise RankError(
                f"L must have full row rank {L.shape[0]}; singular values span "
                f"[{sv.min():.3e}, {sv.max():.3e}]"
            )
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "a", a)

    @property
    def u(self) -> int:
        return self.L.shape[0]


@dataclass(frozen=True)
class ConditionalContext:
    """Everything needed to re-estimate the noncentrality for a contrast."""

    amatrix: AMatrix
    dataset: LmmDataset
    struct: CovarianceStructure
    beta: np.ndarray
    delta: np.ndarray


@dataclass(frozen=True)
class TukeyContrast:
    i: int
    j: int
    statistic: float
    threshold: float
    p_value: float
    reject: bool


@dataclass(frozen=True)
class TukeyResult:
    contrasts: list[TukeyContrast]
    m_prime: int
    alpha: float
    threshold: float
    floored: bool = False

    @property
    def any_reject(self) -> bool:
        return any(c.reject for c in self.contrasts)


@dataclass(frozen=True)
class ProjectionResult:
    """Radial projection of a rejected hypothesis point onto the set boundary."""

    t: np.ndarray
    t_star: np.ndarray
    scale: float
    row_adjustments: np.ndarray
    coordinate_deltas: Optional[np.ndarray]
    designated: Optional[list[int]]
    a_star: Optional[np.ndarray]
    statistic_before: float
    statistic_after: Optional[float]
    threshold: float
    adjusted: bool


def _quadratic_form(sigma: np.ndarray, diff: np.ndarray) -> float:
    return float(diff @ solve_spd(sigma, diff))


def ellipsoid_contains(mu_hat, cov: CovEstimate, mu0, alpha: float) -> EllipsoidTest:
    """Check ``mu0`` against the simultaneous confidence set around ``mu_hat``."""
    mu_hat = np.asarray(mu_hat, dtype=float).ravel()
    mu0 = np.asarray(mu0, dtype=float).ravel()
    if mu_hat.size != cov.m or mu0.size != cov.m:
        raise StructuralError("dimension mismatch between estimate, covariance and point")
    if not 0.0 < alpha < 1.0:
        raise StructuralError("alpha must lie in (0, 1)")
    m = cov.m
    stat = _quadratic_form(cov.sigma, mu_hat - mu0)
    if cov.law == "marginal":
        lam = 0.0
        threshold = chi2_quantile(m, 1.0 - alpha)
        p_value = float(1.0 - _chi2.cdf(stat, m))
    else:
        lam = float(cov.lambda_hat or 0.0)
        threshold = noncentral_chi2_quantile(m, lam, 1.0 - alpha)
        p_value = 1.0 - noncentral_chi2_cdf(stat, m, lam)
    return EllipsoidTest(
        statistic=stat, threshold=threshold, df=m, noncentrality=lam,
        p_value=p_value, reject=stat > threshold, law=cov.law,
    )


def test_linear(
    hyp: LinearHypothesis,
    mu_hat,
    cov: CovEstimate,
    alpha: float,
    cond: Optional[ConditionalContext] = None,
) -> EllipsoidTest:
    """Test ``H0: L(mu - a) = 0`` with the transformed confidence set.

    Under the conditional law the noncentrality is re-estimated for the
    transformed problem, which needs the full data context (``cond``).
    """
    mu_hat = np.asarray(mu_hat, dtype=float).ravel()
    if hyp.L.shape[1] != mu_hat.size or mu_hat.size != cov.m:
        raise StructuralError("contrast, estimate and covariance dimensions disagree")
    if not 0.0 < alpha < 1.0:
        raise StructuralError("alpha must lie in (0, 1)")
    L = hyp.L
    u = hyp.u
    S = L @ cov.sigma @ L.T
    S = 0.5 * (S + S.T)
    t = L @ (mu_hat - hyp.a)
    stat = _quadratic_form(S, t)
    if cov.law == "marginal":
        lam = 0.0
        threshold = chi2_quantile(u, 1.0 - alpha)
        p_value = float(1.0 - _chi2.cdf(stat, u))
    else:
        if cond is None:
            raise StructuralError(
                "conditional linear tests need the data context to re-estimate "
                "the noncentrality"
            )
        lam = lambda_hat(cov, cond.amatrix, cond.dataset, cond.struct,
                         cond.beta, cond.delta, contrast=L)
        threshold = noncentral_chi2_quantile(u, lam, 1.0 - alpha)
        p_value = 1.0 - noncentral_chi2_cdf(stat, u, lam)
    return EllipsoidTest(
        statistic=stat, threshold=threshold, df=u, noncentrality=lam,
        p_value=p_value, reject=stat > threshold, law=cov.law,
    )


def tukey_all_pairs(
    mu_hat,
    cov_v: CovEstimate,
    subset: Sequence[int],
    alpha: float,
    mu0=None,
    diagnostics=None,
    compute_p_values: bool = True,
) -> TukeyResult:
    """All simple contrasts ``mu_i - mu_j`` over ``subset`` by the range rule.

    The effective count is ``m' = m - w + 1`` (floored at 2, with a
    warning, since the range of fewer than two variables is undefined).
    ``diagnostics`` may carry a :class:`~lmminfer.model.TukeyConditionReport`;
    a failing one triggers a warning, not an error.  Simulation loops that
    only need rejections can skip the per-contrast quadrature with
    ``compute_p_values=False`` (p-values come back as NaN).
    """
    mu_hat = np.asarray(mu_hat, dtype=float).ravel()
    subset = list(subset)
    w = len(subset)
    if w < 2:
        raise StructuralError("the Tukey screen needs a subset of at least two clusters")
    if len(set(subset)) != w or min(subset) < 0 or max(subset) >= mu_hat.size:
        raise StructuralError("subset must be distinct valid cluster indices")
    if cov_v.law != "conditional":
        warnings.warn("Tukey screens are built for the conditional covariance",
                      RuntimeWarning)
    if diagnostics is not None and not diagnostics.passed:
        warnings.warn(
            "cluster similarity diagnostics exceed tolerance; the Tukey screen "
            "may be unreliable", RuntimeWarning)
    m = mu_hat.size
    m_prime = m - w + 1
    floored = m_prime < 2
    if floored:
        warnings.warn(
            "effective count m' fell below 2 (testing all clusters pairwise); "
            "floored at 2 -- consider the classical balanced Tukey procedure",
            RuntimeWarning)
        m_prime = 2
    mu0 = np.zeros(m) if mu0 is None else np.asarray(mu0, dtype=float).ravel()
    root, _ = sym_sqrt(cov_v.sigma)
    threshold = range_quantile(m_prime, 1.0 - alpha)
    contrasts = []
    for a_idx in range(w):
        for b_idx in range(a_idx + 1, w):
            # Canonical orientation so the statistic is symmetric in (i, j).
            i, j = sorted((subset[a_idx], subset[b_idx]))
            crow = root[i] - root[j]
            c_plus = float(np.sum(crow[crow > 0]))
            if c_plus <= 0:
                raise DegenerateCovarianceError(
                    f"contrast ({i},{j}) has a nonpositive standardizer")
            stat = abs((mu_hat[i] - mu_hat[j]) - (mu0[i] - mu0[j])) / c_plus
            p_value = (1.0 - range_cdf(stat, m_prime)) if compute_p_values else float("nan")
            contrasts.append(TukeyContrast(
                i=i, j=j, statistic=stat, threshold=threshold,
                p_value=p_value, reject=stat > threshold,
            ))
    return TukeyResult(contrasts=contrasts, m_prime=m_prime, alpha=alpha,
                       threshold=threshold, floored=floored)


def tukey_interval(
    c,
    mu_hat,
    cov_v: CovEstimate,
    alpha: float,
    m_prime: int,
    eta_c: float,
) -> tuple[float, float]:
    """Simultaneous interval for ``c'mu``: center ``c'mu_hat``, half width
    ``c_plus (eta_c + q_{m',1-alpha})``.

    ``eta_c`` (the standardized conditional bias of the contrast) is
    generally unknown and must be supplied; testing scenarios use 0.
    """
    c = np.asarray(c, dtype=float).ravel()
    mu_hat = np.asarray(mu_hat, dtype=float).ravel()
    root, _ = sym_sqrt(cov_v.sigma)
    crow = c @ root
    c_plus = float(np.sum(crow[crow > 0]))
    if c_plus <= 0:
        raise DegenerateCovarianceError("contrast has a nonpositive standardizer")
    center = float(c @ mu_hat)
    half = c_plus * (eta_c + range_quantile(max(m_prime, 2), 1.0 - alpha))
    return center - half, center + half


def project_onto_ellipsoid(
    hyp: LinearHypothesis,
    mu_hat,
    cov: CovEstimate,
    alpha: float,
    designated: Optional[Sequence[int]] = None,
    cond: Optional[ConditionalContext] = None,
) -> ProjectionResult:
    """Shrink a rejected point radially onto the confidence-set boundary.

    The contrast vector ``t = L(mu_hat - a)`` is scaled by
    ``sqrt(threshold/statistic)``; each row's adjustment is attributed to
    its designated coordinate by solving the designated subsystem.  A
    non-rejected test returns the identity (no adjustment).
    """
    test = test_linear(hyp, mu_hat, cov, alpha, cond=cond)
    t = hyp.L @ (np.asarray(mu_hat, dtype=float).ravel() - hyp.a)
    if not test.reject:
        return ProjectionResult(
            t=t, t_star=t.copy(), scale=1.0,
            row_adjustments=np.zeros(hyp.u), coordinate_deltas=None,
            designated=list(designated) if designated is not None else None,
            a_star=hyp.a.copy(), statistic_before=test.statistic,
            statistic_after=test.statistic, threshold=test.threshold,
            adjusted=False,
        )
    scale = float(np.sqrt(test.threshold / test.statistic))
    t_star = scale * t
    row_adj = t - t_star
    coordinate_deltas = None
    a_star = None
    stat_after = None
    designated_list = list(designated) if designated is not None else None
    if designated_list is not None:
        if len(designated_list) != hyp.u:
            raise StructuralError("one designated coordinate per contrast row required")
        sub = hyp.L[:, designated_list]
        try:
            coordinate_deltas = np.linalg.solve(sub, row_adj)
        except np.linalg.LinAlgError:
            raise RankError(
                "designated coordinates cannot absorb the adjustment "
                "(designated subsystem is singular)") from None
        a_star = hyp.a.copy()
        for col, delta_val in zip(designated_list, coordinate_deltas):
            a_star[col] += delta_val
        moved = LinearHypothesis(L=hyp.L, a=a_star)
        stat_after = test_linear(moved, mu_hat, cov, alpha, cond=cond).statistic
    return ProjectionResult(
        t=t, t_star=t_star, scale=scale, row_adjustments=row_adj,
        coordinate_deltas=coordinate_deltas, designated=designated_list,
        a_star=a_star, statistic_before=test.statistic,
        statistic_after=stat_after, threshold=test.threshold, adjusted=True,
    )


def clusterwise_coverage_shift(
    i: int,
    delta,
    targets: MixedTargets,
    dataset: LmmDataset,
    struct: CovarianceStructure,
    v: np.ndarray,
    alpha: float,
) -> tuple[float, float, float, float]:
    """Exact conditional coverage of the marginal interval for cluster ``i``.

    Returns ``(bias, sd_cond, sd_marg, coverage)`` where the coverage is
    the closed form ``Phi(rho z - b/s) - Phi(-rho z - b/s)`` with
    ``rho = sd_marg/sd_cond``, ``b`` the conditional bias of the BLUP and
    ``s = sd_cond``; known-delta quantities throughout.
    """
    ctx = CovContext(dataset, struct, targets, delta)
    marg = k1(ctx) + k2(ctx)
    cond_cov = l1(ctx) + l2(ctx)
    sd_marg = float(np.sqrt(marg[i, i]))
    sd_cond = float(np.sqrt(cond_cov[i, i]))
    if sd_cond <= 0:
        raise DegenerateCovarianceError(f"conditional sd of cluster {i} is zero")
    amat = a_matrix(dataset, struct, targets, ctx.delta, ctx=ctx)
    v = np.asarray(v, dtype=float).ravel()
    zv = np.concatenate([blk.Z @ v[dataset.q * k: dataset.q * (k + 1)]
                         for k, blk in enumerate(dataset.blocks)])
    bias = float(amat.a[i] @ zv)
    z = float(_norm.ppf(1.0 - alpha / 2.0))
    rho = sd_marg / sd_cond
    shift = bias / sd_cond
    upper = max(0.0, float(_norm.cdf(rho * z - shift)) - 0.5)
    lower = max(0.0, 0.5 - float(_norm.cdf(-rho * z - shift)))
    return bias, sd_cond, sd_marg, upper + lower
