"""Quantile engines: central/non-central chi-square and the normal range.

The non-central chi-square CDF is evaluated as a Poisson mixture of
central chi-square CDFs with an analytic truncation bound, and inverted
by bracketed root finding.  The range distribution (max minus min of m
i.i.d. standard normals) uses the classical single-integral form of its
CDF, evaluated by adaptive quadrature.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy import integrate
from scipy.optimize import brentq
from scipy.stats import chi2 as _chi2
from scipy.stats import norm as _norm

from .exceptions import NumericError, StructuralError

__all__ = [
    "chi2_quantile",
    "noncentral_chi2_cdf",
    "noncentral_chi2_quantile",
    "range_cdf",
    "range_quantile",
]

# Poisson-weight tail mass discarded in the non-central CDF series.
_SERIES_TAIL = 1e-14
_MAX_SERIES_TERMS = 2_000_000


def _check_prob(prob: float) -> float:
    prob = float(prob)
    if not 0.0 < prob < 1.0:
        raise StructuralError(f"probability must lie strictly in (0, 1), got {prob}")
    return prob


@lru_cache(maxsize=4096)
def chi2_quantile(m: int, prob: float) -> float:
    """Quantile of the central chi-square distribution with ``m`` df."""
    if m < 1:
        raise StructuralError("degrees of freedom must be >= 1")
    prob = _check_prob(prob)
    return float(_chi2.ppf(prob, m))


def _poisson_weights(half_lambda: float) -> tuple[int, np.ndarray]:
    """Poisson(half_lambda) pmf on an index window covering all but 1e-14 mass.

    Returns the first index of the window and the weights.  Built
    outwards from the mode so that large noncentralities stay stable.
    """
    if half_lambda == 0.0:
        return 0, np.array([1.0])
    mode = int(half_lambda)
    # log pmf at the mode, then recur in both directions.
    log_mode = -half_lambda + mode * math.log(half_lambda) - math.lgamma(mode + 1)
    lo = hi = mode
    weights = {mode: math.exp(log_mode)}
    total = weights[mode]
    w_hi = w_lo = weights[mode]
    while total < 1.0 - _SERIES_TAIL:
        if hi - lo > _MAX_SERIES_TERMS:
            raise NumericError(
                f"non-central chi-square series needs more than "
                f"{_MAX_SERIES_TERMS} terms (lambda/2 = {half_lambda:.3e})"
            )
        # Extend on the side with the larger next weight.
        next_hi = w_hi * half_lambda / (hi + 1)
        next_lo = w_lo * lo / half_lambda if lo > 0 else -1.0
        if max(next_hi, next_lo) < 1e-18:
            # Remaining mass has underflowed; the float sum of the pmf can
            # stall just below one even though nothing is missing.
            break
        if next_hi >= next_lo:
            hi += 1
            w_hi = next_hi
            weights[hi] = w_hi
            total += w_hi
        else:
            lo -= 1
            w_lo = next_lo
            weights[lo] = w_lo
            total += w_lo
    idx = np.arange(lo, hi + 1)
    return lo, np.array([weights[j] for j in idx])


def noncentral_chi2_cdf(x: float, m: int, lam: float) -> float:
    """CDF of the non-central chi-square with ``m`` df and noncentrality ``lam``."""
    if m < 1:
        raise StructuralError("degrees of freedom must be >= 1")
    if lam < 0:
        raise StructuralError("noncentrality must be >= 0")
    if x <= 0:
        return 0.0
    if lam == 0.0:
        return float(_chi2.cdf(x, m))
    start, weights = _poisson_weights(lam / 2.0)
    js = np.arange(start, start + weights.size)
    return float(np.sum(weights * _chi2.cdf(x, m + 2 * js)))


def noncentral_chi2_quantile(m: int, lam: float, prob: float) -> float:
    """Quantile of the non-central chi-square distribution.

    ``lam = 0`` reduces exactly to :func:`chi2_quantile` (shared path).
    The result satisfies ``CDF(q) = prob`` to 1e-8.
    """
    prob = _check_prob(prob)
    if lam < 0:
        raise StructuralError("noncentrality must be >= 0")
    if lam == 0.0:
        return chi2_quantile(m, prob)

    def f(x):
        return noncentral_chi2_cdf(x, m, lam) - prob

    # Bracket: mean + spread heuristic, expanded until the sign flips.
    hi = m + lam + 10.0 * math.sqrt(2.0 * (m + 2.0 * lam)) + 10.0
    lo = 0.0
    tries = 0
    while f(hi) < 0:
        hi *= 2.0
        tries += 1
        if tries > 200:
            raise NumericError("failed to bracket the non-central quantile")
    return float(brentq(f, lo, hi, xtol=1e-10, rtol=1e-12))


def range_cdf(q: float, m: int) -> float:
    """CDF of the range of ``m`` i.i.d. standard normals at ``q``.

    Uses ``F(q) = m * int phi(z) [Phi(z) - Phi(z - q)]^(m-1) dz`` with
    integration limits of +-9 standard deviations.
    """
    if m < 2:
        raise StructuralError("the range needs at least two variables")
    if q <= 0:
        return 0.0

    def integrand(z):
        return _norm.pdf(z) * (_norm.cdf(z) - _norm.cdf(z - q)) ** (m - 1)

    val, _ = integrate.quad(integrand, -9.0, 9.0 + q, epsabs=1e-12, epsrel=1e-10, limit=200)
    return float(min(m * val, 1.0))


@lru_cache(maxsize=1024)
def range_quantile(m: int, prob: float) -> float:
    """Quantile of the range distribution of ``m`` standard normals (to 1e-6)."""
    if m < 2:
        raise StructuralError("the range needs at least two variables")
    prob = _check_prob(prob)

    def f(q):
        return range_cdf(q, m) - prob

    hi = 2.0 * _norm.ppf(1.0 - (1.0 - prob) / (2.0 * m)) + 2.0
    tries = 0
    while f(hi) < 0:
        hi *= 2.0
        tries += 1
        if tries > 100:
            raise NumericError("failed to bracket the range quantile")
    return float(brentq(f, 1e-12, hi, xtol=1e-8, rtol=1e-10))
