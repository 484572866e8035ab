"""Data model for block-structured linear mixed models.

A dataset is a list of independent clusters, each carrying a response
vector ``y_i``, a fixed-effects design ``X_i`` and a random-effects
design ``Z_i``.  The covariance of the model is described separately by
a :class:`CovarianceStructure` providing ``G(delta)``, ``R_i(delta)``
and their derivatives in the variance parameters ``delta``.  Targets of
inference are the mixed parameters ``mu_i = l_i' beta + h_i' v_i``.

The nested error regression (NER) special case -- random intercept per
cluster, i.i.d. errors, ``delta = (sigma_v^2, sigma_e^2)`` -- ships as a
built-in constructor; any other structure can be supplied through the
same interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import DegenerateCovarianceError, StructuralError

__all__ = [
    "ClusterBlock",
    "LmmDataset",
    "VarianceParams",
    "CovarianceStructure",
    "MixedTargets",
    "NerSpec",
    "TukeyConditionReport",
    "build_ner",
    "ner_structure",
    "default_ner_targets",
    "marginal_cov",
    "marginal_cov_derivative",
    "icc",
    "check_tukey_conditions",
    "as_delta",
]


def as_delta(delta) -> np.ndarray:
    """Coerce ``delta`` (array-like or VarianceParams) to a 1-d float array."""
    if isinstance(delta, VarianceParams):
        return delta.values
    arr = np.atleast_1d(np.asarray(delta, dtype=float))
    if arr.ndim != 1:
        raise StructuralError("variance parameters must be a 1-d vector")
    return arr


@dataclass(frozen=True)
class ClusterBlock:
    """One cluster: response ``y`` (n_i,), designs ``X`` (n_i, p), ``Z`` (n_i, q)."""

    id: str
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        if y.ndim != 1 or y.size < 1:
            raise StructuralError(f"cluster {self.id!r}: y must be a nonempty vector")
        if X.ndim != 2 or Z.ndim != 2:
            raise StructuralError(f"cluster {self.id!r}: X and Z must be matrices")
        if X.shape[0] != y.size or Z.shape[0] != y.size:
            raise StructuralError(
                f"cluster {self.id!r}: row counts disagree "
                f"(y: {y.size}, X: {X.shape[0]}, Z: {Z.shape[0]})"
            )
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise StructuralError(f"cluster {self.id!r}: non-finite values in {name}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class LmmDataset:
    """Ordered collection of clusters with consistent dimensions.

    Cluster order is the insertion order; every length-m output downstream
    (predictions, covariance rows, contrast indices) follows it.
    """

    blocks: tuple[ClusterBlock, ...]

    def __post_init__(self):
        blocks = tuple(self.blocks)
        if len(blocks) < 2:
            raise StructuralError("a dataset needs at least two clusters")
        p = blocks[0].X.shape[1]
        q = blocks[0].Z.shape[1]
        for b in blocks:
            if b.X.shape[1] != p or b.Z.shape[1] != q:
                raise StructuralError(
                    f"cluster {b.id!r}: column counts differ from the first cluster "
                    f"(p={b.X.shape[1]} vs {p}, q={b.Z.shape[1]} vs {q})"
                )
        ids = [b.id for b in blocks]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate cluster ids")
        X = np.vstack([b.X for b in blocks])
        if np.linalg.matrix_rank(X) < p:
            raise StructuralError("stacked fixed-effects design is rank deficient")
        object.__setattr__(self, "blocks", blocks)

    @property
    def m(self) -> int:
        return len(self.blocks)

    @property
    def n(self) -> int:
        return int(sum(b.n for b in self.blocks))

    @property
    def p(self) -> int:
        return self.blocks[0].X.shape[1]

    @property
    def q(self) -> int:
        return self.blocks[0].Z.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([b.n for b in self.blocks], dtype=int)

    @property
    def ids(self) -> list[str]:
        return [b.id for b in self.blocks]

    def offsets(self) -> np.ndarray:
        """Start offset of each block in the stacked observation vector."""
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def stacked_y(self) -> np.ndarray:
        return np.concatenate([b.y for b in self.blocks])

    def stacked_x(self) -> np.ndarray:
        return np.vstack([b.X for b in self.blocks])

    def stacked_z(self) -> np.ndarray:
        """Dense block-diagonal random-effects design, shape (n, q*m)."""
        n, q, m = self.n, self.q, self.m
        Z = np.zeros((n, q * m))
        off = self.offsets()
        for i, b in enumerate(self.blocks):
            Z[off[i]: off[i + 1], q * i: q * (i + 1)] = b.Z
        return Z

    def reordered(self, order: Sequence[int]) -> "LmmDataset":
        return LmmDataset(blocks=tuple(self.blocks[i] for i in order))


@dataclass(frozen=True)
class VarianceParams:
    """Variance-component vector ``delta``; componentwise nonnegative."""

    values: np.ndarray

    def __post_init__(self):
        values = np.atleast_1d(np.asarray(self.values, dtype=float))
        if values.ndim != 1 or values.size < 1:
            raise StructuralError("delta must be a nonempty vector")
        if not np.all(np.isfinite(values)):
            raise StructuralError("delta contains non-finite values")
        if np.any(values < 0):
            raise StructuralError(f"delta must be componentwise >= 0, got {values}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class CovarianceStructure:
    """Variance model ``G(delta)``, ``R_i(delta)`` with first derivatives.

    ``g_of(delta)`` returns the (q, q) random-effects covariance,
    ``r_of(delta, i)`` the (n_i, n_i) error covariance of block ``i`` of
    the dataset the structure was built for, and ``dg`` / ``dr`` the
    derivatives in component ``e`` of ``delta``.  When ``linear_in_delta``
    is set, second derivatives of both are exactly zero and several
    downstream second-order terms simplify.
    """

    n_params: int
    g_of: Callable[[np.ndarray], np.ndarray]
    r_of: Callable[[np.ndarray, int], np.ndarray]
    dg: Callable[[np.ndarray, int], np.ndarray]
    dr: Callable[[np.ndarray, int, int], np.ndarray]
    linear_in_delta: bool = False
    name: str = "custom"

    def check_delta(self, delta) -> np.ndarray:
        delta = as_delta(delta)
        if delta.size != self.n_params:
            raise StructuralError(
                f"delta has {delta.size} components, structure needs {self.n_params}"
            )
        return delta


@dataclass(frozen=True)
class MixedTargets:
    """Per-cluster coefficient pairs defining ``mu_i = l_i' beta + h_i' v_i``."""

    l: np.ndarray  # (m, p)
    h: np.ndarray  # (m, q)

    def __post_init__(self):
        l = np.atleast_2d(np.asarray(self.l, dtype=float))
        h = np.atleast_2d(np.asarray(self.h, dtype=float))
        if l.shape[0] != h.shape[0]:
            raise StructuralError("l and h must have one row per cluster")
        if not (np.all(np.isfinite(l)) and np.all(np.isfinite(h))):
            raise StructuralError("targets contain non-finite values")
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "h", h)

    @property
    def m(self) -> int:
        return self.l.shape[0]


@dataclass(frozen=True)
class NerSpec:
    """Row-wise input for the nested error regression model.

    ``rows`` is a sequence of ``(cluster_id, y, x)`` with ``x`` the
    fixed-effects covariate row.  Cluster order is first appearance.
    """

    rows: Sequence[tuple]

    def grouped(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        order: list[str] = []
        ys: dict[str, list[float]] = {}
        xs: dict[str, list[np.ndarray]] = {}
        width = None
        for idx, row in enumerate(self.rows):
            try:
                cid, y, x = row
            except (TypeError, ValueError) as exc:
                raise StructuralError(f"row {idx}: expected (cluster, y, x)") from exc
            if cid is None or (isinstance(cid, float) and np.isnan(cid)):
                raise StructuralError(f"row {idx}: missing cluster id")
            cid = str(cid)
            x = np.atleast_1d(np.asarray(x, dtype=float))
            if width is None:
                width = x.size
            elif x.size != width:
                raise StructuralError(
                    f"row {idx}: covariate width {x.size} != {width} seen earlier"
                )
            if cid not in ys:
                order.append(cid)
                ys[cid] = []
                xs[cid] = []
            ys[cid].append(float(y))
            xs[cid].append(x)
        if not order:
            raise StructuralError("no rows")
        return [(cid, np.array(ys[cid]), np.vstack(xs[cid])) for cid in order]


def ner_structure(sizes) -> CovarianceStructure:
    """NER covariance: ``G = sigma_v^2``, ``R_i = sigma_e^2 I_{n_i}``.

    Parameter order is fixed as ``delta = (sigma_v^2, sigma_e^2)``.
    ``sizes`` are the block sizes of the dataset the structure serves.
    """
    sizes = np.asarray(sizes, dtype=int)

    def g_of(delta):
        return np.array([[delta[0]]])

    def r_of(delta, i):
        return delta[1] * np.eye(sizes[i])

    def dg(delta, e):
        return np.array([[1.0 if e == 0 else 0.0]])

    def dr(delta, i, e):
        return (1.0 if e == 1 else 0.0) * np.eye(sizes[i])

    return CovarianceStructure(
        n_params=2, g_of=g_of, r_of=r_of, dg=dg, dr=dr, linear_in_delta=True, name="ner"
    )


def default_ner_targets(dataset: LmmDataset) -> MixedTargets:
    """Cluster-mean targets: ``l_i`` the column means of ``X_i``, ``h_i = 1``."""
    l = np.vstack([b.X.mean(axis=0) for b in dataset.blocks])
    h = np.ones((dataset.m, 1))
    return MixedTargets(l=l, h=h)


def build_ner(spec: NerSpec) -> tuple[LmmDataset, CovarianceStructure, MixedTargets]:
    """Assemble the NER dataset, structure and cluster-mean targets from rows.

    Returns
    -------
    (dataset, structure, targets) with ``q = 1``, ``Z_i`` a column of ones,
    ``delta = (sigma_v^2, sigma_e^2)`` and ``linear_in_delta`` set.
    """
    groups = spec.grouped()
    blocks = []
    for cid, y, X in groups:
        blocks.append(ClusterBlock(id=cid, y=y, X=X, Z=np.ones((y.size, 1))))
    dataset = LmmDataset(blocks=tuple(blocks))
    struct = ner_structure(dataset.sizes)
    targets = default_ner_targets(dataset)
    return dataset, struct, targets


def marginal_cov(
    struct: CovarianceStructure, block: ClusterBlock, delta, i: int = 0
) -> np.ndarray:
    """Marginal covariance ``V_i = R_i + Z_i G Z_i'`` of block ``i``.

    Raises :class:`DegenerateCovarianceError` when the result is not
    positive definite (e.g. ``delta`` fully on the boundary).
    """
    delta = struct.check_delta(delta)
    G = struct.g_of(delta)
    R = struct.r_of(delta, i)
    V = R + block.Z @ G @ block.Z.T
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError(
            f"V is not positive definite for cluster {block.id!r} at delta={delta}"
        ) from None
    return V


def marginal_cov_derivative(
    struct: CovarianceStructure, block: ClusterBlock, delta, e: int, i: int = 0
) -> np.ndarray:
    """``dV_i/ddelta_e = dR_i/ddelta_e + Z_i (dG/ddelta_e) Z_i'``."""
    delta = struct.check_delta(delta)
    return struct.dr(delta, i, e) + block.Z @ struct.dg(delta, e) @ block.Z.T


def icc(delta, n_i: int) -> float:
    """Intraclass correlation ``gamma_i = sigma_v^2 / (sigma_v^2 + sigma_e^2/n_i)``.

    Uses the NER parameter order ``delta = (sigma_v^2, sigma_e^2)``.
    """
    delta = as_delta(delta)
    if delta.size != 2:
        raise StructuralError("icc is defined for the NER delta (sigma_v^2, sigma_e^2)")
    sv2, se2 = delta
    denom = sv2 + se2 / n_i
    if denom <= 0:
        raise DegenerateCovarianceError("sigma_v^2 + sigma_e^2/n_i must be positive")
    return float(sv2 / denom)


@dataclass(frozen=True)
class TukeyConditionReport:
    """Deviations relevant for the similarity conditions behind Tukey screens."""

    max_h_deviation: float
    max_l_deviation: float
    max_precision_deviation: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)


def check_tukey_conditions(
    dataset: LmmDataset,
    struct: CovarianceStructure,
    targets: MixedTargets,
    delta,
    tolerance: float = 1e-8,
) -> TukeyConditionReport:
    """Measure how far clusters are from the exchangeability Tukey screens need.

    Reports the max pairwise deviations of ``h_i``, ``l_i`` and of the
    summed precision ``1' V_i^{-1} 1``; all are exactly zero for a
    balanced NER panel with intercept-only design.
    """
    delta = struct.check_delta(delta)
    h, l = targets.h, targets.l
    dev_h = 0.0
    dev_l = 0.0
    for i in range(dataset.m):
        for j in range(i + 1, dataset.m):
            dev_h = max(dev_h, float(np.linalg.norm(h[i] - h[j])))
            dev_l = max(dev_l, float(np.linalg.norm(l[i] - l[j])))
    precisions = []
    for i, b in enumerate(dataset.blocks):
        V = b.Z @ struct.g_of(delta) @ b.Z.T + struct.r_of(delta, i)
        ones = np.ones(b.n)
        precisions.append(float(ones @ np.linalg.solve(V, ones)))
    precisions = np.array(precisions)
    dev_p = float(precisions.max() - precisions.min())
    passed = max(dev_h, dev_l, dev_p) <= tolerance
    return TukeyConditionReport(
        max_h_deviation=dev_h,
        max_l_deviation=dev_l,
        max_precision_deviation=dev_p,
        tolerance=tolerance,
        passed=passed,
        details={"summed_precisions": precisions},
    )
