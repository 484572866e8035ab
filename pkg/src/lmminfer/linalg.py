"""Small linear-algebra helpers: Woodbury inversion and symmetric roots."""

from __future__ import annotations

import warnings

import numpy as np

from .exceptions import DegenerateCovarianceError

__all__ = ["woodbury_inverse", "sym_sqrt", "solve_spd", "logdet_spd"]


def woodbury_inverse(r_inv: np.ndarray, Z: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Invert ``V = R + Z G Z'`` given ``R^{-1}``, via the low-rank update.

    Returns ``R^{-1} - R^{-1} Z (G^{-1} + Z' R^{-1} Z)^{-1} Z' R^{-1}``,
    symmetrized.  ``G = 0`` (or exactly singular ``G`` with a zero range
    hit) skips the correction.  If the inner q x q system is singular the
    function falls back to dense inversion of ``V`` with a warning.
    """
    r_inv = np.asarray(r_inv, dtype=float)
    Z = np.asarray(Z, dtype=float)
    G = np.atleast_2d(np.asarray(G, dtype=float))
    if not np.any(G):
        return 0.5 * (r_inv + r_inv.T)
    rz = r_inv @ Z
    # G-free inner form (I + G Z'R^{-1}Z) stays valid for singular G.
    inner = np.eye(G.shape[0]) + G @ (Z.T @ rz)
    try:
        correction = rz @ np.linalg.solve(inner, G @ rz.T)
    except np.linalg.LinAlgError:
        warnings.warn(
            "singular inner matrix in Woodbury step; falling back to dense inversion",
            RuntimeWarning,
        )
        R = np.linalg.inv(r_inv)
        V = R + Z @ G @ Z.T
        try:
            vinv = np.linalg.inv(V)
        except np.linalg.LinAlgError:
            raise DegenerateCovarianceError(
                "V = R + Z G Z' is singular; no inverse exists") from None
        return 0.5 * (vinv + vinv.T)
    vinv = r_inv - correction
    return 0.5 * (vinv + vinv.T)


def sym_sqrt(M: np.ndarray, clamp: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric PSD square root and inverse root via eigendecomposition.

    Eigenvalues in ``(-clamp * ||M||, 0)`` are treated as zero; anything
    more negative raises :class:`DegenerateCovarianceError`.  The inverse
    root is taken on the range (zero eigenvalues are not inverted).
    """
    M = np.asarray(M, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    scale = max(float(np.abs(vals).max()), 1.0e-300)
    if vals.min() < -clamp * scale:
        raise DegenerateCovarianceError(
            f"matrix is not PSD: min eigenvalue {vals.min():.3e} "
            f"(clamp threshold {-clamp * scale:.3e})"
        )
    vals = np.clip(vals, 0.0, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    inv_vals = np.where(vals > 0, 1.0 / np.sqrt(np.where(vals > 0, vals, 1.0)), 0.0)
    inv_root = (vecs * inv_vals) @ vecs.T
    return 0.5 * (root + root.T), 0.5 * (inv_root + inv_root.T)


def solve_spd(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``M x = rhs`` for symmetric positive definite ``M``."""
    from scipy.linalg import cho_factor, cho_solve

    try:
        c = cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises ValueError
        raise DegenerateCovarianceError(str(exc)) from None
    except Exception as exc:
        raise DegenerateCovarianceError(f"matrix not positive definite: {exc}") from None
    return cho_solve(c, rhs)


def logdet_spd(M: np.ndarray) -> float:
    """log-determinant of a symmetric positive definite matrix."""
    sign, val = np.linalg.slogdet(M)
    if sign <= 0:
        raise DegenerateCovarianceError("matrix not positive definite in logdet")
    return float(val)
