"""Scikit-learn style front end for the nested error regression model.

``NestedErrorRegression`` exposes the usual estimator surface --
``fit(X, y, groups)``, ``predict``, ``get_params``/``set_params`` -- on
top of the package's fitting, prediction and inference machinery, so the
model composes with pipelines and model-selection utilities.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .covariance import a_matrix, sigma_conditional, sigma_marginal
from .estimation import fit_henderson3_ner, fit_reml, known_fit
from .exceptions import StructuralError
from .inference import (
    ConditionalContext,
    LinearHypothesis,
    ellipsoid_contains,
    test_linear,
    tukey_all_pairs,
)
from .model import (
    LmmDataset,
    NerSpec,
    build_ner,
    check_tukey_conditions,
    icc,
)
from .prediction import eblup, random_effects

__all__ = ["NestedErrorRegression"]


class NestedErrorRegression(BaseEstimator, RegressorMixin):
    """Random-intercept model with simultaneous inference for cluster means.

    Parameters
    ----------
    method : {"reml", "henderson3", "known"}
        Variance-component estimator.  ``"known"`` requires ``delta``.
    delta : array-like of shape (2,), optional
        Known ``(sigma_v^2, sigma_e^2)`` when ``method="known"``;
        also usable as the REML start.
    alpha : float
        Default level for the inference helpers.

    Attributes
    ----------
    variance_components_ : ndarray, ``(sigma_v^2, sigma_e^2)``.
    fixed_effects_ : ndarray of shape (p,).
    cluster_means_ : ndarray, EBLUP of each cluster's mixed target.
    cluster_labels_ : list of str, first-appearance order.
    random_effects_ : ndarray of shape (m,), predicted cluster effects.
    icc_ : ndarray of shape (m,), intraclass correlation per cluster.
    """

    def __init__(self, method: str = "reml", delta=None, alpha: float = 0.05):
        self.method = method
        self.delta = delta
        self.alpha = alpha

    def fit(self, X, y, groups=None):
        if groups is None:
            raise StructuralError("groups (cluster labels per row) are required")
        X, y = check_X_y(X, y, ensure_min_samples=2)
        groups = np.asarray(groups)
        if groups.shape[0] != y.shape[0]:
            raise StructuralError("groups must have one label per row")
        rows = [(str(groups[i]), float(y[i]), X[i]) for i in range(y.shape[0])]
        dataset, struct, targets = build_ner(NerSpec(rows))
        if self.method == "reml":
            fit = fit_reml(dataset, struct, start=self.delta)
        elif self.method == "henderson3":
            fit = fit_henderson3_ner(dataset)
        elif self.method == "known":
            if self.delta is None:
                raise StructuralError("method='known' requires delta")
            fit = known_fit(dataset, struct, self.delta)
        else:
            raise StructuralError(f"unknown method {self.method!r}")
        self.dataset_ = dataset
        self.struct_ = struct
        self.targets_ = targets
        self.fit_ = fit
        self.variance_components_ = fit.delta.copy()
        self.fixed_effects_ = fit.beta_hat.copy()
        self.cluster_labels_ = dataset.ids
        self.cluster_means_ = eblup(dataset, struct, targets, fit).mu
        self.random_effects_ = random_effects(
            dataset, struct, fit.delta, fit.beta_hat).ravel()
        self.icc_ = np.array([icc(fit.delta, n) for n in dataset.sizes])
        self.converged_ = fit.converged
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, groups=None):
        """Row-level predictions ``x' beta + v_cluster``.

        Unknown group labels fall back to the fixed part alone.
        """
        check_is_fitted(self, "fit_")
        X = check_array(X)
        mean = X @ self.fixed_effects_
        if groups is None:
            return mean
        lookup = {label: k for k, label in enumerate(self.cluster_labels_)}
        effects = np.array([
            self.random_effects_[lookup[str(g)]] if str(g) in lookup else 0.0
            for g in np.asarray(groups)
        ])
        return mean + effects

    # -- inference helpers --------------------------------------------------

    def covariance(self, law: str = "conditional"):
        """Covariance estimate of the cluster-mean prediction errors."""
        check_is_fitted(self, "fit_")
        if law == "marginal":
            return sigma_marginal(self.dataset_, self.struct_, self.targets_, self.fit_)
        if law == "conditional":
            return sigma_conditional(self.dataset_, self.struct_, self.targets_, self.fit_)
        raise StructuralError(f"unknown law {law!r}")

    def conditional_context(self) -> ConditionalContext:
        check_is_fitted(self, "fit_")
        amat = a_matrix(self.dataset_, self.struct_, self.targets_, self.fit_.delta)
        return ConditionalContext(
            amatrix=amat, dataset=self.dataset_, struct=self.struct_,
            beta=self.fit_.beta_hat, delta=self.fit_.delta,
        )

    def confidence_test(self, mu0, law: str = "conditional", alpha: Optional[float] = None):
        """Membership of ``mu0`` in the simultaneous confidence set."""
        cov = self.covariance(law)
        return ellipsoid_contains(self.cluster_means_, cov, mu0,
                                  self.alpha if alpha is None else alpha)

    def linear_test(self, L, a, law: str = "conditional", alpha: Optional[float] = None):
        """Test ``H0: L(mu - a) = 0`` under the requested law."""
        hyp = LinearHypothesis(L=L, a=a)
        cov = self.covariance(law)
        cond = self.conditional_context() if law == "conditional" else None
        return test_linear(hyp, self.cluster_means_, cov,
                           self.alpha if alpha is None else alpha, cond=cond)

    def tukey(self, subset: Optional[Sequence[int]] = None,
              alpha: Optional[float] = None):
        """All-pairs Tukey screen over ``subset`` (default: all clusters)."""
        check_is_fitted(self, "fit_")
        subset = list(range(self.dataset_.m)) if subset is None else list(subset)
        cov = self.covariance("conditional")
        diag = check_tukey_conditions(
            self.dataset_, self.struct_, self.targets_, self.fit_.delta)
        return tukey_all_pairs(self.cluster_means_, cov, subset,
                               self.alpha if alpha is None else alpha,
                               diagnostics=diag)
