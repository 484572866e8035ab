"""Monte Carlo harness for coverage, power and cluster-wise experiments.

All scenarios use the nested error regression design: intercept-only
fixed effects with a coefficient drawn once from Uniform(0, 1), cluster
effects drawn once from N(0, sigma_v^2) and held fixed across
replications under the conditional law (redrawn per replication under
the marginal law), and cluster-mean targets.

Reproducibility: every random draw comes from a counter-based
generator keyed by (seed, stream role, replication index), so results
are identical for any worker count and any scheduling order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


def _limit_blas_threads():
    """Pool initializer: one BLAS thread per worker process.

    Workers run embarrassingly parallel replications; letting each spawn
    a full BLAS thread pool oversubscribes the cores badly.
    """
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = "1"
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass

from .covariance import (
    CovContext,
    CovEstimate,
    a_matrix,
    k1,
    k2,
    l1,
    l2,
    sigma_conditional,
    sigma_marginal,
)
from .estimation import fit_henderson3_ner, fit_reml, known_fit
from .exceptions import LmmError, StructuralError
from .inference import clusterwise_coverage_shift, tukey_all_pairs
from .linalg import logdet_spd, sym_sqrt
from .model import (
    ClusterBlock,
    CovarianceStructure,
    LmmDataset,
    MixedTargets,
    default_ner_targets,
    ner_structure,
)
from .prediction import eblup
from .quantiles import chi2_quantile, noncentral_chi2_quantile

__all__ = [
    "SimConfig",
    "CoverageReport",
    "MethodSummary",
    "Population",
    "generate_population",
    "run_coverage",
    "run_clusterwise",
    "run_power_linear",
    "run_power_tukey",
    "run_marginal_table",
    "two_group_sizes",
]

# Stream roles for the counter-based generator.
_ROLE_BETA = 0
_ROLE_V = 1
_ROLE_E = 2
_ROLE_V_REDRAW = 3


def _rng(seed: int, role: int, rep: int = 0) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(role), int(rep)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SimConfig:
    """One simulation scenario; ``seed`` is mandatory (no entropy defaults)."""

    m: int
    n_i: int | Sequence[int]
    sigma_v2: float
    sigma_e2: float
    reps: int
    seed: int
    alpha: float = 0.05
    law: str = "conditional"  # "conditional" | "marginal"
    estimator: str = "reml"   # "known" | "reml" | "henderson3"
    oracle_lambda: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.m < 2:
            raise StructuralError("need at least two clusters")
        if self.reps < 1:
            raise StructuralError("reps must be >= 1")
        if self.seed is None:
            raise StructuralError("a seed is mandatory")
        if not 0.0 < self.alpha < 1.0:
            raise StructuralError("alpha must lie in (0, 1)")
        if self.law not in ("conditional", "marginal"):
            raise StructuralError(f"unknown law {self.law!r}")
        if self.estimator not in ("known", "reml", "henderson3"):
            raise StructuralError(f"unknown estimator {self.estimator!r}")
        sizes = self.sizes()
        if np.any(sizes < 1):
            raise StructuralError("cluster sizes must be >= 1")

    def sizes(self) -> np.ndarray:
        if np.isscalar(self.n_i):
            return np.full(self.m, int(self.n_i), dtype=int)
        sizes = np.asarray(list(self.n_i), dtype=int)
        if sizes.size != self.m:
            raise StructuralError("n_i list must have one entry per cluster")
        return sizes


def two_group_sizes(m: int, n_i: int, n_j: int) -> list[int]:
    """First half of the clusters sized ``n_i``, second half ``n_j``."""
    half = m // 2
    return [n_i] * (m - half) + [n_j] * half


@dataclass(frozen=True)
class Population:
    """Fixed quantities of a scenario: coefficient, effects, designs, targets."""

    beta: np.ndarray
    v: np.ndarray
    sizes: np.ndarray
    mu: np.ndarray
    c1_stat: float
    c2_stat: float


def generate_population(cfg: SimConfig) -> Population:
    """Draw the once-per-scenario quantities.

    The coefficient is Uniform(0, 1); cluster effects are
    N(0, sigma_v^2).  The report carries the scaled effect sums that the
    conditional theory assumes to stay bounded (descriptive, not
    asserted).
    """
    sizes = cfg.sizes()
    beta = np.array([_rng(cfg.seed, _ROLE_BETA).uniform()])
    v = _rng(cfg.seed, _ROLE_V).normal(0.0, math.sqrt(cfg.sigma_v2), size=cfg.m)
    if cfg.sigma_v2 == 0:
        v = np.zeros(cfg.m)
    mu = beta[0] + v
    c1 = float(abs(v.sum()) / math.sqrt(cfg.m))
    c2 = float(abs((v**2 - cfg.sigma_v2).sum()) / math.sqrt(cfg.m))
    return Population(beta=beta, v=v, sizes=sizes, mu=mu, c1_stat=c1, c2_stat=c2)


def _make_dataset(sizes: np.ndarray, y: np.ndarray) -> LmmDataset:
    blocks = []
    off = 0
    for i, n_i in enumerate(sizes):
        blocks.append(ClusterBlock(
            id=f"c{i}", y=y[off: off + n_i],
            X=np.ones((n_i, 1)), Z=np.ones((n_i, 1)),
        ))
        off += n_i
    return LmmDataset(blocks=tuple(blocks))


@dataclass
class _Scenario:
    """Per-process cache of everything that does not change across reps."""

    cfg: SimConfig
    pop: Population
    dataset0: LmmDataset
    struct: CovarianceStructure
    targets: MixedTargets
    delta_true: np.ndarray
    blup_map: np.ndarray          # (m, n): known-delta BLUP as a linear map of y
    beta_map: np.ndarray          # (p, n): GLS coefficient map at the true delta
    marg_known: np.ndarray        # K1 + K2 at the true delta
    cond_known: np.ndarray        # L1 + L2 at the true delta
    marg_known_invroot: np.ndarray
    cond_known_invroot: np.ndarray
    amat_rows: np.ndarray         # (m, n) bias map at the true delta
    ax_map: np.ndarray            # (m, p): amat_rows @ X
    lambda_noise: float           # Frobenius term of the noncentrality estimate
    logdet_marg_known: float
    logdet_cond_known: float
    oracle_lambda: float
    z_rep: np.ndarray             # expand v to observations


def _build_scenario(cfg: SimConfig) -> _Scenario:
    pop = generate_population(cfg)
    sizes = pop.sizes
    n = int(sizes.sum())
    y0 = np.zeros(n)
    dataset0 = _make_dataset(sizes, y0)
    struct = ner_structure(sizes)
    targets = default_ner_targets(dataset0)
    delta_true = np.array([cfg.sigma_v2, cfg.sigma_e2])

    ctx = CovContext(dataset0, struct, targets, delta_true)
    marg_known = k1(ctx) + k2(ctx)
    cond_known = l1(ctx) + l2(ctx)
    _, marg_invroot = sym_sqrt(marg_known)
    _, cond_invroot = sym_sqrt(cond_known)
    blup_map = ctx.w  # w_i'y is exactly the known-delta BLUP
    off = dataset0.offsets()
    beta_map = np.zeros((dataset0.p, n))
    for i, b in enumerate(dataset0.blocks):
        beta_map[:, off[i]: off[i + 1]] = (ctx.ws.a_inv @ b.X.T @ ctx.ws.vinv[i])
    amat = a_matrix(dataset0, struct, targets, delta_true, ctx=ctx)
    sa = cond_invroot @ amat.a
    lambda_noise = cfg.sigma_e2 * float(np.sum(sa**2))
    z_rep = np.repeat(pop.v, sizes)
    bias = amat.a @ z_rep
    oracle_lambda = float(bias @ (cond_invroot @ (cond_invroot @ bias)))
    return _Scenario(
        cfg=cfg, pop=pop, dataset0=dataset0, struct=struct, targets=targets,
        delta_true=delta_true, blup_map=blup_map, beta_map=beta_map,
        marg_known=marg_known, cond_known=cond_known,
        marg_known_invroot=marg_invroot, cond_known_invroot=cond_invroot,
        amat_rows=amat.a, ax_map=amat.a @ dataset0.stacked_x(),
        lambda_noise=lambda_noise,
        logdet_marg_known=logdet_spd(marg_known),
        logdet_cond_known=logdet_spd(cond_known),
        oracle_lambda=oracle_lambda, z_rep=z_rep,
    )


def _fit_for(cfg: SimConfig, dataset, struct, delta_true):
    if cfg.estimator == "reml":
        return fit_reml(dataset, struct, start=delta_true)
    if cfg.estimator == "henderson3":
        return fit_henderson3_ner(dataset)
    return known_fit(dataset, struct, delta_true)


_METHOD_ORDER_CONDITIONAL = (
    "marginal_known", "marginal_fit",
    "conditional_known_lambda", "conditional_known", "conditional_fit",
)
_METHOD_ORDER_MARGINAL = ("marginal_known", "marginal_fit")


def _coverage_rep(sc: _Scenario, rep: int) -> dict:
    cfg = sc.cfg
    sizes = sc.pop.sizes
    n = int(sizes.sum())
    if cfg.law == "marginal":
        v = _rng(cfg.seed, _ROLE_V_REDRAW, rep).normal(
            0.0, math.sqrt(cfg.sigma_v2), size=cfg.m)
        mu = sc.pop.beta[0] + v
        z_rep = np.repeat(v, sizes)
    else:
        mu = sc.pop.mu
        z_rep = sc.z_rep
    e = _rng(cfg.seed, _ROLE_E, rep).normal(0.0, math.sqrt(cfg.sigma_e2), size=n)
    y = sc.pop.beta[0] + z_rep + e

    out: dict = {"rep": rep, "failed": False}
    m = cfg.m
    alpha = cfg.alpha
    thr_central = chi2_quantile(m, 1.0 - alpha)

    # Exact-oracle column: the known-delta BLUP (a fixed linear map of y)
    # against the known-(lambda, delta) set is an exact pivot.
    mu_t = sc.blup_map @ y
    if cfg.law == "conditional":
        diff_t = mu_t - mu
        stat_oracle = float(np.sum((sc.cond_known_invroot @ diff_t) ** 2))
        thr_oracle = noncentral_chi2_quantile(m, sc.oracle_lambda, 1.0 - alpha)
        out["conditional_known_lambda"] = (
            stat_oracle <= thr_oracle, sc.oracle_lambda, sc.logdet_cond_known,
            thr_oracle)

    # Under the marginal law the known-delta set around the BLUP is an exact
    # pivot; score it before any fitting so it never depends on a fit.
    if cfg.law == "marginal":
        stat_t = float(np.sum((sc.marg_known_invroot @ (mu_t - mu)) ** 2))
        out["marginal_known"] = (stat_t <= thr_central, 0.0,
                                 sc.logdet_marg_known, thr_central)

    # The remaining known-delta columns score the run's predictor against the
    # oracle sets: with an estimated delta that predictor is the EBLUP, which
    # is what makes the "known delta, estimated lambda" column informative.
    if cfg.estimator == "known":
        mu_hat = mu_t
    else:
        dataset = _make_dataset(sizes, y)
        try:
            fit = _fit_for(cfg, dataset, sc.struct, sc.delta_true)
            if not fit.converged:
                raise LmmError("variance fit did not converge")
            mu_hat = eblup(dataset, sc.struct, sc.targets, fit).mu
        except LmmError:
            out["failed"] = True
            return out

    diff = mu_hat - mu
    if cfg.law == "conditional":
        stat_marg_known = float(np.sum((sc.marg_known_invroot @ diff) ** 2))
        out["marginal_known"] = (stat_marg_known <= thr_central, 0.0,
                                 sc.logdet_marg_known, thr_central)
        stat_cond_known = float(np.sum((sc.cond_known_invroot @ diff) ** 2))
        # Estimated noncentrality with the set parameters held at the truth.
        beta_plug = sc.beta_map @ y
        sa_y = sc.cond_known_invroot @ (sc.amat_rows @ y)
        sa_mean = sc.cond_known_invroot @ (sc.ax_map @ beta_plug)
        lam_est = max(0.0, float(np.sum(sa_y**2)) - sc.lambda_noise
                      - float(np.sum(sa_mean**2)))
        thr_est = noncentral_chi2_quantile(m, lam_est, 1.0 - alpha)
        out["conditional_known"] = (
            stat_cond_known <= thr_est, lam_est, sc.logdet_cond_known, thr_est)

    if cfg.estimator == "known":
        return out

    # Fully estimated columns.
    try:
        cov_m = sigma_marginal(dataset, sc.struct, sc.targets, fit)
        stat_m = float(diff @ np.linalg.solve(cov_m.sigma, diff))
        out["marginal_fit"] = (stat_m <= thr_central, 0.0,
                               logdet_spd(cov_m.sigma), thr_central)
        if cfg.law == "conditional":
            cov_c = sigma_conditional(dataset, sc.struct, sc.targets, fit)
            stat_c = float(diff @ np.linalg.solve(cov_c.sigma, diff))
            thr_c = noncentral_chi2_quantile(m, cov_c.lambda_hat, 1.0 - alpha)
            out["conditional_fit"] = (stat_c <= thr_c, cov_c.lambda_hat,
                                      logdet_spd(cov_c.sigma), thr_c)
    except LmmError:
        out["failed"] = True
    return out


def _coverage_chunk(args) -> list[dict]:
    cfg, reps = args
    sc = _build_scenario(cfg)
    return [_coverage_rep(sc, rep) for rep in reps]


@dataclass(frozen=True)
class MethodSummary:
    method: str
    coverage: float
    se: float
    rel_log_volume: float
    n_used: int


@dataclass(frozen=True)
class CoverageReport:
    config: SimConfig
    methods: dict[str, MethodSummary]
    reps: int
    failed_reps: int
    c1_stat: float
    c2_stat: float

    def rows(self) -> list[dict]:
        """Flat rows for CSV emission."""
        out = []
        for name, s in self.methods.items():
            out.append({
                "m": self.config.m,
                "n_i": "/".join(map(str, sorted(set(self.config.sizes().tolist())))),
                "sigma_v2": self.config.sigma_v2,
                "sigma_e2": self.config.sigma_e2,
                "law": self.config.law,
                "estimator": self.config.estimator,
                "alpha": self.config.alpha,
                "seed": self.config.seed,
                "reps": self.reps,
                "method": name,
                "coverage": s.coverage,
                "se": s.se,
                "rel_log_volume": s.rel_log_volume,
                "failed_reps": self.failed_reps,
            })
        return out


def _run_reps(cfg: SimConfig, worker, reps: int) -> list[dict]:
    """Run per-rep records, optionally across processes; order by rep index."""
    rep_ids = list(range(reps))
    if cfg.threads <= 1:
        records = worker((cfg, rep_ids))
    else:
        chunks = np.array_split(rep_ids, cfg.threads * 4)
        args = [(cfg, [int(r) for r in ch]) for ch in chunks if len(ch)]
        records = []
        with ProcessPoolExecutor(max_workers=cfg.threads,
                                 initializer=_limit_blas_threads) as pool:
            for part in pool.map(worker, args):
                records.extend(part)
    records.sort(key=lambda r: r["rep"])
    return records


def run_coverage(cfg: SimConfig) -> CoverageReport:
    """Coverage of the simultaneous sets for the scenario's method columns.

    Under the conditional law: marginal sets with known/estimated delta
    and conditional sets with known (lambda, delta), known delta, and
    estimated everything.  Under the marginal law only the marginal
    columns apply.  Failed fits are excluded and counted, never dropped
    silently.
    """
    pop = generate_population(cfg)
    records = _run_reps(cfg, _coverage_chunk, cfg.reps)
    order = (_METHOD_ORDER_CONDITIONAL if cfg.law == "conditional"
             else _METHOD_ORDER_MARGINAL)
    if cfg.estimator == "known":
        order = tuple(k for k in order if not k.endswith("_fit"))
    failed = sum(1 for r in records if r["failed"])
    # Reference volume: the fitted marginal set when available, else known.
    ref_key = "marginal_fit" if any("marginal_fit" in r for r in records) else "marginal_known"
    methods = {}
    m = cfg.m
    for key in order:
        rows = [r for r in records
                if key in r and not (r["failed"] and key.endswith("_fit"))]
        if not rows:
            continue
        covered = np.array([r[key][0] for r in rows], dtype=bool)
        cov = float(covered.mean())
        se = float(math.sqrt(cov * (1.0 - cov) / covered.size))
        rel = []
        for r in rows:
            if ref_key not in r:
                continue
            ld, thr = r[key][2], r[key][3]
            ld_ref, thr_ref = r[ref_key][2], r[ref_key][3]
            rel.append(0.5 * (ld - ld_ref) + 0.5 * m * math.log(thr / thr_ref))
        methods[key] = MethodSummary(
            method=key, coverage=cov, se=se,
            rel_log_volume=float(np.mean(rel)) if rel else 0.0,
            n_used=int(covered.size),
        )
    return CoverageReport(
        config=cfg, methods=methods, reps=cfg.reps, failed_reps=failed,
        c1_stat=pop.c1_stat, c2_stat=pop.c2_stat,
    )


# ---------------------------------------------------------------------------
# Cluster-wise coverage (marginal intervals under conditional law)
# ---------------------------------------------------------------------------


def _clusterwise_chunk(args) -> list[dict]:
    cfg, reps = args
    sc = _build_scenario(cfg)
    z = _z_quantile(1.0 - cfg.alpha / 2.0)
    sd = np.sqrt(np.diag(sc.marg_known))
    out = []
    for rep in reps:
        e = _rng(cfg.seed, _ROLE_E, rep).normal(
            0.0, math.sqrt(cfg.sigma_e2), size=int(sc.pop.sizes.sum()))
        y = sc.pop.beta[0] + sc.z_rep + e
        mu_t = sc.blup_map @ y
        covered = np.abs(mu_t - sc.pop.mu) <= z * sd
        out.append({"rep": rep, "failed": False, "covered": covered})
    return out


def _z_quantile(p: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(p))


@dataclass(frozen=True)
class ClusterwiseReport:
    config: SimConfig
    per_cluster: np.ndarray
    theoretical: np.ndarray
    average: float
    theoretical_average: float
    v: np.ndarray


def run_clusterwise(cfg: SimConfig) -> ClusterwiseReport:
    """Per-cluster coverage of marginal intervals under the conditional law.

    Known-delta intervals ``mu_i~ +- z sqrt((K1+K2)_ii)`` are compared
    against the exact conditional coverage curve.
    """
    sc = _build_scenario(cfg)
    records = _run_reps(cfg, _clusterwise_chunk, cfg.reps)
    hits = np.vstack([r["covered"] for r in records])
    per_cluster = hits.mean(axis=0)
    theo = np.empty(cfg.m)
    for i in range(cfg.m):
        _, _, _, theo[i] = clusterwise_coverage_shift(
            i, sc.delta_true, sc.targets, sc.dataset0, sc.struct,
            sc.pop.v.reshape(-1, 1), cfg.alpha)
    return ClusterwiseReport(
        config=cfg, per_cluster=per_cluster, theoretical=theo,
        average=float(per_cluster.mean()),
        theoretical_average=float(theo.mean()), v=sc.pop.v,
    )


# ---------------------------------------------------------------------------
# Power experiments
# ---------------------------------------------------------------------------


def _power_linear_chunk(args) -> list[dict]:
    (cfg, shift), reps = args
    sc = _build_scenario(cfg)
    n = int(sc.pop.sizes.sum())
    thr_central = chi2_quantile(cfg.m, 1.0 - cfg.alpha)
    out = []
    for rep in reps:
        e = _rng(cfg.seed, _ROLE_E, rep).normal(0.0, math.sqrt(cfg.sigma_e2), size=n)
        y = sc.pop.beta[0] + sc.z_rep + shift + e
        a_point = sc.pop.mu  # H0 point; truth is mu + shift
        rec = {"rep": rep, "failed": False}
        if cfg.estimator == "known":
            mu_t = sc.blup_map @ y
            diff = mu_t - a_point
            stat_m = float(np.sum((sc.marg_known_invroot @ diff) ** 2))
            rec["marginal"] = stat_m > thr_central
            stat_c = float(np.sum((sc.cond_known_invroot @ diff) ** 2))
            beta_plug = sc.beta_map @ y
            sa_y = sc.cond_known_invroot @ (sc.amat_rows @ y)
            sa_mean = sc.cond_known_invroot @ (sc.ax_map @ beta_plug)
            lam = max(0.0, float(np.sum(sa_y**2)) - sc.lambda_noise
                      - float(np.sum(sa_mean**2)))
            rec["conditional"] = stat_c > noncentral_chi2_quantile(
                cfg.m, lam, 1.0 - cfg.alpha)
        else:
            dataset = _make_dataset(sc.pop.sizes, y)
            try:
                fit = _fit_for(cfg, dataset, sc.struct, sc.delta_true)
                if not fit.converged:
                    raise LmmError("variance fit did not converge")
                mu_hat = eblup(dataset, sc.struct, sc.targets, fit).mu
                diff = mu_hat - a_point
                cov_m = sigma_marginal(dataset, sc.struct, sc.targets, fit)
                rec["marginal"] = float(
                    diff @ np.linalg.solve(cov_m.sigma, diff)) > thr_central
                cov_c = sigma_conditional(dataset, sc.struct, sc.targets, fit)
                stat_c = float(diff @ np.linalg.solve(cov_c.sigma, diff))
                rec["conditional"] = stat_c > noncentral_chi2_quantile(
                    cfg.m, cov_c.lambda_hat, 1.0 - cfg.alpha)
            except LmmError:
                rec["failed"] = True
        out.append(rec)
    return out


@dataclass(frozen=True)
class PowerPoint:
    delta: float
    method: str
    power: float
    se: float
    n_used: int


def run_power_linear(cfg: SimConfig, shifts: Sequence[float]) -> list[PowerPoint]:
    """Rejection rate of ``H0: mu = a`` when the truth is ``a + shift * 1``."""
    points = []
    for shift in shifts:
        rep_ids = list(range(cfg.reps))
        if cfg.threads <= 1:
            records = _power_linear_chunk(((cfg, float(shift)), rep_ids))
        else:
            chunks = np.array_split(rep_ids, cfg.threads * 4)
            args = [((cfg, float(shift)), [int(r) for r in ch]) for ch in chunks if len(ch)]
            records = []
            with ProcessPoolExecutor(max_workers=cfg.threads,
                                 initializer=_limit_blas_threads) as pool:
                for part in pool.map(_power_linear_chunk, args):
                    records.extend(part)
        records.sort(key=lambda r: r["rep"])
        for method in ("marginal", "conditional"):
            rows = [r for r in records if method in r]
            if not rows:
                continue
            rej = np.array([r[method] for r in rows], dtype=bool)
            pw = float(rej.mean())
            points.append(PowerPoint(
                delta=float(shift), method=method, power=pw,
                se=float(math.sqrt(pw * (1 - pw) / rej.size)), n_used=rej.size,
            ))
    return points


def _equalized_v(cfg: SimConfig, w: int) -> np.ndarray:
    """Effects with the first w clusters sharing one draw."""
    v = _rng(cfg.seed, _ROLE_V).normal(0.0, math.sqrt(cfg.sigma_v2), size=cfg.m)
    v[:w] = v[0]
    return v


def _power_tukey_chunk(args) -> list[dict]:
    (cfg, shift, w), reps = args
    sizes = cfg.sizes()
    n = int(sizes.sum())
    v = _equalized_v(cfg, w)
    v_alt = v.copy()
    v_alt[0] += shift
    z_rep = np.repeat(v_alt, sizes)
    beta = np.array([_rng(cfg.seed, _ROLE_BETA).uniform()])
    dataset0 = _make_dataset(sizes, np.zeros(n))
    struct = ner_structure(sizes)
    targets = default_ner_targets(dataset0)
    delta_true = np.array([cfg.sigma_v2, cfg.sigma_e2])
    subset = list(range(w))
    out = []
    ctx = CovContext(dataset0, struct, targets, delta_true)
    cond_known = l1(ctx) + l2(ctx)
    blup_map = ctx.w
    cov_known = CovEstimate(
        sigma=cond_known, law="conditional", lambda_hat=0.0,
        components={}, delta_used=delta_true, method="known")
    for rep in reps:
        e = _rng(cfg.seed, _ROLE_E, rep).normal(0.0, math.sqrt(cfg.sigma_e2), size=n)
        y = beta[0] + z_rep + e
        rec = {"rep": rep, "failed": False}
        try:
            if cfg.estimator == "known":
                mu_hat = blup_map @ y
                cov_c = cov_known
            else:
                dataset = _make_dataset(sizes, y)
                fit = _fit_for(cfg, dataset, struct, delta_true)
                if not fit.converged:
                    raise LmmError("variance fit did not converge")
                mu_hat = eblup(dataset, struct, targets, fit).mu
                cov_c = sigma_conditional(dataset, struct, targets, fit,
                                          attach_lambda=False)
            res = tukey_all_pairs(mu_hat, cov_c, subset, cfg.alpha,
                                  compute_p_values=False)
            rec["reject"] = res.any_reject
        except LmmError:
            rec["failed"] = True
        out.append(rec)
    return out


def run_power_tukey(cfg: SimConfig, shifts: Sequence[float],
                    w: Optional[int] = None) -> list[PowerPoint]:
    """Tukey screen power: first ``w`` clusters share one effect; under the
    alternative exactly one of them is shifted."""
    w = cfg.m // 2 if w is None else int(w)
    if w < 2:
        raise StructuralError("the equalized subset needs at least two clusters")
    points = []
    for shift in shifts:
        rep_ids = list(range(cfg.reps))
        if cfg.threads <= 1:
            records = _power_tukey_chunk(((cfg, float(shift), w), rep_ids))
        else:
            chunks = np.array_split(rep_ids, cfg.threads * 4)
            args = [((cfg, float(shift), w), [int(r) for r in ch])
                    for ch in chunks if len(ch)]
            records = []
            with ProcessPoolExecutor(max_workers=cfg.threads,
                                 initializer=_limit_blas_threads) as pool:
                for part in pool.map(_power_tukey_chunk, args):
                    records.extend(part)
        records.sort(key=lambda r: r["rep"])
        rows = [r for r in records if not r["failed"]]
        rej = np.array([r["reject"] for r in rows], dtype=bool)
        pw = float(rej.mean()) if rej.size else float("nan")
        points.append(PowerPoint(
            delta=float(shift), method=f"tukey_{cfg.estimator}", power=pw,
            se=float(math.sqrt(pw * (1 - pw) / rej.size)) if rej.size else float("nan"),
            n_used=int(rej.size),
        ))
    return points


def run_marginal_table(configs: Sequence[SimConfig]) -> list[CoverageReport]:
    """Coverage reports under the marginal law (effects redrawn per rep)."""
    out = []
    for cfg in configs:
        if cfg.law != "marginal":
            cfg = replace(cfg, law="marginal")
        out.append(run_coverage(cfg))
    return out
