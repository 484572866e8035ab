import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmminfer.exceptions import DegenerateCovarianceError, StructuralError
from lmminfer.model import (
    ClusterBlock,
    LmmDataset,
    NerSpec,
    VarianceParams,
    build_ner,
    check_tukey_conditions,
    icc,
    marginal_cov,
    marginal_cov_derivative,
)


def test_build_ner_shapes():
    rows = [("a", 1.0, [1.0]), ("a", 2.0, [1.0]),
            ("b", 0.5, [1.0]), ("b", 1.5, [1.0])]
    ds, struct, tg = build_ner(NerSpec(rows))
    assert (ds.m, ds.n, ds.p, ds.q) == (2, 4, 1, 1)
    assert struct.linear_in_delta
    np.testing.assert_array_equal(ds.blocks[0].Z, np.ones((2, 1)))
    np.testing.assert_array_equal(tg.h, np.ones((2, 1)))


def test_build_ner_intercept_only_targets():
    # Balanced panel with a column of ones: target weights are all one.
    rows = [(f"c{i}", float(i + j), [1.0]) for i in range(100) for j in range(5)]
    ds, _, tg = build_ner(NerSpec(rows))
    assert ds.m == 100 and ds.n == 500
    np.testing.assert_array_equal(tg.l, np.ones((100, 1)))


def test_build_ner_missing_cluster_rejected():
    with pytest.raises(StructuralError):
        NerSpec([(None, 1.0, [1.0]), ("b", 2.0, [1.0])]).grouped()


def test_build_ner_inconsistent_width_rejected():
    with pytest.raises(StructuralError, match="width"):
        NerSpec([("a", 1.0, [1.0]), ("a", 2.0, [1.0, 2.0])]).grouped()


def test_cluster_order_is_first_appearance():
    rows = [("z", 1.0, [1.0]), ("a", 2.0, [1.0]), ("z", 3.0, [1.0]),
            ("m", 4.0, [1.0])]
    ds, _, _ = build_ner(NerSpec(rows))
    assert ds.ids == ["z", "a", "m"]


def test_nonfinite_rejected():
    with pytest.raises(StructuralError, match="non-finite"):
        ClusterBlock(id="a", y=np.array([np.nan]), X=np.ones((1, 1)),
                     Z=np.ones((1, 1)))


def test_rank_deficient_design_rejected():
    blocks = tuple(
        ClusterBlock(id=f"c{i}", y=np.ones(2),
                     X=np.column_stack([np.ones(2), np.ones(2)]),
                     Z=np.ones((2, 1)))
        for i in range(2)
    )
    with pytest.raises(StructuralError, match="rank"):
        LmmDataset(blocks=blocks)


def test_variance_params_validation():
    with pytest.raises(StructuralError):
        VarianceParams(np.array([-1.0, 1.0]))
    vp = VarianceParams(np.array([0.0, 2.0]))
    assert len(vp) == 2


class TestMarginalCov:
    def test_zero_effect_variance_identity(self, t1):
        ds, struct, _, _ = t1
        V = marginal_cov(struct, ds.blocks[0], [0.0, 1.0], 0)
        np.testing.assert_allclose(V, np.eye(2))

    def test_ner_unit_delta(self, t1):
        ds, struct, _, delta = t1
        V = marginal_cov(struct, ds.blocks[0], delta, 0)
        np.testing.assert_allclose(V, np.array([[2.0, 1.0], [1.0, 2.0]]))

    def test_matches_dense_assembly(self):
        rows = [("a", float(j), [1.0]) for j in range(5)]
        rows += [("b", 1.0, [1.0]), ("b", 2.0, [1.0])]
        ds, struct, _ = build_ner(NerSpec(rows))
        V = marginal_cov(struct, ds.blocks[0], [8.0, 2.0], 0)
        dense = 2.0 * np.eye(5) + 8.0 * np.ones((5, 5))
        np.testing.assert_allclose(V, dense, atol=1e-12)

    def test_degenerate_delta_raises(self, t1):
        ds, struct, _, _ = t1
        with pytest.raises(DegenerateCovarianceError, match="c1"):
            marginal_cov(struct, ds.blocks[0], [0.0, 0.0], 0)

    def test_assembly_identity(self, t1):
        # V - R = Z G Z' exactly.
        ds, struct, _, _ = t1
        delta = np.array([2.5, 0.5])
        for i, b in enumerate(ds.blocks):
            V = marginal_cov(struct, b, delta, i)
            R = struct.r_of(delta, i)
            np.testing.assert_allclose(
                V - R, b.Z @ struct.g_of(delta) @ b.Z.T, atol=1e-14)

    def test_derivative_assembly(self, t1):
        ds, struct, _, _ = t1
        delta = np.array([2.5, 0.5])
        dv0 = marginal_cov_derivative(struct, ds.blocks[0], delta, 0, 0)
        dv1 = marginal_cov_derivative(struct, ds.blocks[0], delta, 1, 0)
        np.testing.assert_allclose(dv0, np.ones((2, 2)))
        np.testing.assert_allclose(dv1, np.eye(2))
        # Linear structure: V(delta) = sum_e delta_e dV_e.
        V = marginal_cov(struct, ds.blocks[0], delta, 0)
        np.testing.assert_allclose(V, delta[0] * dv0 + delta[1] * dv1)


class TestIcc:
    def test_symmetric_case(self):
        assert icc([4.0, 4.0], 1) == pytest.approx(0.5)

    def test_zero_effect(self):
        assert icc([0.0, 3.0], 7) == 0.0

    def test_hand_value(self):
        assert icc([8.0, 2.0], 5) == pytest.approx(8.0 / 8.4)

    def test_degenerate(self):
        with pytest.raises(DegenerateCovarianceError):
            icc([0.0, 0.0], 3)

    @given(
        sv2=st.floats(0.01, 50), se2=st.floats(0.01, 50),
        n=st.integers(1, 50),
    )
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_effect_variance_and_size(self, sv2, se2, n):
        base = icc([sv2, se2], n)
        assert icc([sv2 * 1.5, se2], n) > base
        assert icc([sv2, se2], n + 1) > base


class TestTukeyConditions:
    def test_balanced_intercept_only_all_zero(self):
        rows = [(f"c{i}", float(i + j), [1.0]) for i in range(4) for j in range(3)]
        ds, struct, tg = build_ner(NerSpec(rows))
        rep = check_tukey_conditions(ds, struct, tg, [1.0, 1.0])
        assert rep.max_h_deviation == 0.0
        assert rep.max_l_deviation == 0.0
        assert rep.max_precision_deviation == pytest.approx(0.0, abs=1e-12)
        assert rep.passed

    def test_unbalanced_sizes_flagged(self):
        rows = [(f"c{i}", float(j), [1.0]) for i in range(2) for j in range(5)]
        rows += [(f"d{i}", float(j), [1.0]) for i in range(2) for j in range(10)]
        ds, struct, tg = build_ner(NerSpec(rows))
        delta = np.array([8.0, 2.0])
        rep = check_tukey_conditions(ds, struct, tg, delta)
        # 1'V^{-1}1 = n / (sigma_e^2 + n sigma_v^2) for the NER model.
        expected = abs(5 / (2 + 5 * 8) - 10 / (2 + 10 * 8))
        assert rep.max_precision_deviation == pytest.approx(expected, rel=1e-10)
        assert not rep.passed

    def test_heterogeneous_targets(self, small_ner):
        ds, struct, tg, _, _ = small_ner
        h = tg.h.copy()
        h[0] = 3.0
        from lmminfer.model import MixedTargets
        tg2 = MixedTargets(l=tg.l, h=h)
        rep = check_tukey_conditions(ds, struct, tg2, [1.0, 1.0])
        assert rep.max_h_deviation == pytest.approx(2.0)
