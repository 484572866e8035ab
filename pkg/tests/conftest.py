import numpy as np
import pytest

from lmminfer.model import (
    ClusterBlock,
    CovarianceStructure,
    LmmDataset,
    MixedTargets,
    NerSpec,
    build_ner,
    default_ner_targets,
    ner_structure,
)


@pytest.fixture
def t1():
    """Small two-cluster NER instance used throughout for exact checks."""
    rows = [
        ("c1", 1.0, [1.0]), ("c1", 2.0, [2.0]),
        ("c2", 2.0, [1.0]), ("c2", 4.0, [3.0]),
    ]
    dataset, struct, targets = build_ner(NerSpec(rows))
    return dataset, struct, targets, np.array([1.0, 1.0])


def make_ner_instance(m, n_i, delta, seed, beta=None):
    """Random NER data with known truth; returns (dataset, struct, targets, v, e)."""
    rng = np.random.default_rng(seed)
    sizes = np.full(m, n_i) if np.isscalar(n_i) else np.asarray(n_i)
    p = 2
    beta = np.array([1.0, -0.5]) if beta is None else np.asarray(beta)
    v = rng.normal(0, np.sqrt(delta[0]), size=m)
    blocks = []
    noises = []
    for i in range(m):
        X = np.column_stack([np.ones(sizes[i]), rng.normal(size=sizes[i])])
        e = rng.normal(0, np.sqrt(delta[1]), size=sizes[i])
        y = X @ beta + v[i] + e
        blocks.append(ClusterBlock(id=f"c{i}", y=y, X=X, Z=np.ones((sizes[i], 1))))
        noises.append(e)
    dataset = LmmDataset(blocks=tuple(blocks))
    struct = ner_structure(dataset.sizes)
    targets = default_ner_targets(dataset)
    return dataset, struct, targets, v, np.concatenate(noises)


@pytest.fixture
def small_ner():
    """m=4 unbalanced NER instance with two covariates."""
    return make_ner_instance(4, [2, 3, 4, 3], np.array([1.5, 0.8]), seed=7)


def make_h3_instance(m, n_i, delta, seed):
    """NER data without an intercept column, so rank(X, Z) = p + m holds."""
    rng = np.random.default_rng(seed)
    sizes = np.full(m, n_i) if np.isscalar(n_i) else np.asarray(n_i)
    beta = np.array([1.0, -0.5])
    v = rng.normal(0, np.sqrt(delta[0]), size=m)
    blocks = []
    for i in range(m):
        X = np.column_stack([rng.normal(size=sizes[i]),
                             rng.normal(size=sizes[i])])
        e = rng.normal(0, np.sqrt(delta[1]), size=sizes[i])
        y = X @ beta + v[i] + e
        blocks.append(ClusterBlock(id=f"c{i}", y=y, X=X, Z=np.ones((sizes[i], 1))))
    dataset = LmmDataset(blocks=tuple(blocks))
    struct = ner_structure(dataset.sizes)
    targets = default_ner_targets(dataset)
    return dataset, struct, targets, v


@pytest.fixture
def h3_ner():
    """m=4 NER instance fit for Henderson III (no intercept in X)."""
    return make_h3_instance(4, [3, 4, 3, 4], np.array([1.5, 0.8]), seed=13)


def make_general_instance(seed=11):
    """A q=2 random-intercept-and-slope structure, r=3, linear in delta."""
    rng = np.random.default_rng(seed)
    m = 4
    sizes = np.array([3, 4, 3, 4])
    delta = np.array([1.2, 0.7, 0.9])
    blocks = []
    z_list = []
    for i in range(m):
        X = np.column_stack([np.ones(sizes[i]), rng.normal(size=sizes[i])])
        Z = np.column_stack([np.ones(sizes[i]), rng.normal(size=sizes[i])])
        z_list.append(Z)
        blocks.append(ClusterBlock(
            id=f"g{i}", y=rng.normal(size=sizes[i]), X=X, Z=Z))

    def g_of(d):
        return np.diag([d[0], d[1]])

    def r_of(d, i):
        return d[2] * np.eye(sizes[i])

    def dg(d, e):
        out = np.zeros((2, 2))
        if e < 2:
            out[e, e] = 1.0
        return out

    def dr(d, i, e):
        return (1.0 if e == 2 else 0.0) * np.eye(sizes[i])

    struct = CovarianceStructure(
        n_params=3, g_of=g_of, r_of=r_of, dg=dg, dr=dr,
        linear_in_delta=True, name="intercept-slope",
    )
    # Re-draw y with the actual covariance so fits make sense.
    ys = []
    for i in range(m):
        u = rng.multivariate_normal(np.zeros(2), g_of(delta))
        e = rng.normal(0, np.sqrt(delta[2]), size=sizes[i])
        y = blocks[i].X @ np.array([0.5, 1.0]) + z_list[i] @ u + e
        ys.append(y)
    blocks = [ClusterBlock(id=b.id, y=ys[i], X=b.X, Z=b.Z)
              for i, b in enumerate(blocks)]
    dataset = LmmDataset(blocks=tuple(blocks))
    h = rng.normal(size=(m, 2))
    l = rng.normal(size=(m, 2))
    targets = MixedTargets(l=l, h=h)
    return dataset, struct, targets, delta


@pytest.fixture
def general_instance():
    return make_general_instance()
