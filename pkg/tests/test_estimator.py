"""The scikit-learn facade: estimator contract and end-to-end behavior."""

import numpy as np
import pytest
from sklearn.base import clone

from lmminfer.estimator import NestedErrorRegression
from lmminfer.exceptions import StructuralError

from conftest import make_ner_instance


def _flat_data(seed=3, m=6, n_i=5, delta=(2.0, 1.0)):
    ds, struct, tg, v, _ = make_ner_instance(m, n_i, np.array(delta), seed=seed)
    X = ds.stacked_x()
    y = ds.stacked_y()
    groups = np.repeat(ds.ids, ds.sizes)
    return X, y, groups, ds, v


class TestSklearnContract:
    def test_get_set_params_and_clone(self):
        est = NestedErrorRegression(method="henderson3", alpha=0.1)
        params = est.get_params()
        assert params["method"] == "henderson3"
        assert params["alpha"] == 0.1
        est2 = clone(est)
        assert est2.get_params() == params
        est2.set_params(method="reml")
        assert est2.method == "reml"

    def test_fit_requires_groups(self):
        X, y, groups, _, _ = _flat_data()
        with pytest.raises(StructuralError):
            NestedErrorRegression().fit(X, y)

    def test_unfitted_predict_raises(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            NestedErrorRegression().predict(np.ones((2, 2)))


class TestFitPredict:
    def test_attributes_after_fit(self):
        X, y, groups, ds, _ = _flat_data()
        est = NestedErrorRegression().fit(X, y, groups=groups)
        assert est.variance_components_.shape == (2,)
        assert est.fixed_effects_.shape == (2,)
        assert est.cluster_means_.shape == (ds.m,)
        assert est.icc_.shape == (ds.m,)
        assert est.converged_
        assert est.cluster_labels_ == ds.ids

    def test_predict_composes_fixed_and_cluster_parts(self):
        X, y, groups, _, _ = _flat_data()
        est = NestedErrorRegression().fit(X, y, groups=groups)
        preds = est.predict(X, groups=groups)
        assert preds.shape == y.shape
        base = est.predict(X)
        lookup = dict(zip(est.cluster_labels_, est.random_effects_))
        np.testing.assert_allclose(
            preds - base, np.array([lookup[g] for g in groups]), atol=1e-12)

    def test_unknown_group_falls_back_to_fixed_part(self):
        X, y, groups, _, _ = _flat_data()
        est = NestedErrorRegression().fit(X, y, groups=groups)
        out = est.predict(X[:2], groups=["nope", groups[0]])
        base = est.predict(X[:2])
        assert out[0] == base[0]
        assert out[1] != base[1]

    def test_known_method_uses_given_delta(self):
        X, y, groups, _, _ = _flat_data()
        est = NestedErrorRegression(method="known", delta=[2.0, 1.0])
        est.fit(X, y, groups=groups)
        np.testing.assert_array_equal(est.variance_components_, [2.0, 1.0])

    def test_score_is_r2(self):
        X, y, groups, _, _ = _flat_data()
        est = NestedErrorRegression().fit(X, y, groups=groups)
        r2 = est.score(X, y)
        assert isinstance(r2, float)


class TestInferenceFacade:
    def test_confidence_test_center(self):
        X, y, groups, _, _ = _flat_data()
        est = NestedErrorRegression().fit(X, y, groups=groups)
        res = est.confidence_test(est.cluster_means_, law="marginal")
        assert res.statistic == pytest.approx(0.0)
        assert not res.reject

    def test_conditional_test_runs(self):
        X, y, groups, _, _ = _flat_data()
        est = NestedErrorRegression().fit(X, y, groups=groups)
        res = est.confidence_test(np.zeros(6), law="conditional")
        assert res.noncentrality >= 0.0
        assert res.law == "conditional"

    def test_linear_test_and_tukey(self):
        X, y, groups, _, _ = _flat_data()
        est = NestedErrorRegression().fit(X, y, groups=groups)
        L = np.zeros((1, 6))
        L[0, 0], L[0, 1] = 1.0, -1.0
        res = est.linear_test(L, np.zeros(6), law="marginal")
        assert res.df == 1
        tk = est.tukey(subset=[0, 1, 2])
        assert len(tk.contrasts) == 3
        assert tk.m_prime == 4
