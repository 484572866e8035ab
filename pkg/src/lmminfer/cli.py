"""Command-line surface: fit, predict, test, tukey, project, simulate.

Input data are CSV files with a header; required columns ``cluster``
(string label) and ``y`` (float), optional covariate columns ``x1..xp``
(without any, an intercept-only design is used).  Configuration is a
JSON document validated against the shipped schema (unknown keys are
rejected).  Reports go to stdout as JSON; ``--out`` additionally writes
them to files, and the simulate subcommand writes ``coverage.csv`` /
``power.csv``.

Exit codes: 0 ok, 2 validation error, 3 numeric failure, 4 nothing to do.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .covariance import a_matrix, sigma_conditional, sigma_marginal
from .estimation import fit_henderson3_ner, fit_reml, known_fit
from .exceptions import (
    DegenerateCovarianceError,
    LmmError,
    NothingToDoError,
    NumericError,
    RankError,
    StructuralError,
)
from .inference import (
    ConditionalContext,
    LinearHypothesis,
    project_onto_ellipsoid,
    test_linear,
    tukey_all_pairs,
)
from .model import (
    NerSpec,
    build_ner,
    check_tukey_conditions,
    icc,
)
from .prediction import eblup, random_effects
from .simulation import (
    SimConfig,
    run_clusterwise,
    run_coverage,
    run_marginal_table,
    run_power_linear,
    run_power_tukey,
    two_group_sizes,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_NOTHING = 4


def _load_schema() -> dict:
    with resources.files("lmminfer.schemas").joinpath("run_config.schema.json").open() as f:
        return json.load(f)


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise StructuralError(f"cannot read config {path}: {exc}") from None
    import jsonschema

    try:
        jsonschema.validate(config, _load_schema())
    except jsonschema.ValidationError as exc:
        raise StructuralError(f"invalid config: {exc.message}") from None
    return config


def read_table(path: str) -> NerSpec:
    """Read the CSV input table, reporting offending rows by number."""
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise StructuralError(f"cannot open data file: {exc}") from None
    with f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise StructuralError("data file is empty")
        fields = [name.strip() for name in reader.fieldnames]
        if "cluster" not in fields or "y" not in fields:
            raise StructuralError("data file needs 'cluster' and 'y' columns")
        x_cols = sorted(
            (c for c in fields if c.startswith("x") and c[1:].isdigit()),
            key=lambda c: int(c[1:]),
        )
        rows = []
        for line_no, record in enumerate(reader, start=2):
            cluster = (record.get("cluster") or "").strip()
            if not cluster:
                raise StructuralError(f"row {line_no}: missing cluster label")
            raw_y = (record.get("y") or "").strip()
            if not raw_y:
                raise StructuralError(f"row {line_no}: missing y")
            try:
                y = float(raw_y)
            except ValueError:
                raise StructuralError(f"row {line_no}: y is not a number") from None
            if x_cols:
                try:
                    x = [float((record.get(c) or "").strip()) for c in x_cols]
                except ValueError:
                    raise StructuralError(
                        f"row {line_no}: non-numeric covariate value") from None
            else:
                x = [1.0]
            rows.append((cluster, y, np.array(x)))
    if not rows:
        raise StructuralError("data file has no rows")
    return NerSpec(rows)


def _fit_from_config(dataset, struct, config):
    estimator = config.get("estimator", "reml")
    delta = config.get("delta")
    if estimator == "reml":
        return fit_reml(dataset, struct, start=delta)
    if estimator == "henderson3":
        return fit_henderson3_ner(dataset)
    if estimator == "known":
        if delta is None:
            raise StructuralError("estimator 'known' requires delta in the config")
        return known_fit(dataset, struct, delta)
    raise StructuralError(f"unknown estimator {estimator!r}")


def _emit(report: dict, args, name: str) -> None:
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    config = load_config(args.config)
    dataset, struct, targets = build_ner(read_table(args.data))
    fit = _fit_from_config(dataset, struct, config)
    from .prediction import blup_components

    comp = blup_components(dataset, struct, targets, fit.delta)
    pred = eblup(dataset, struct, targets, fit)
    effects = random_effects(dataset, struct, fit.delta, fit.beta_hat)
    diag = check_tukey_conditions(dataset, struct, targets, fit.delta)
    v_hat = effects.ravel()
    m = dataset.m
    report = {
        "estimator": fit.method,
        "delta": fit.delta,
        "beta": fit.beta_hat,
        "vbar": fit.vbar,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "boundary": fit.boundary_flags,
        "clusters": [
            {
                "id": dataset.ids[i],
                "n": int(dataset.sizes[i]),
                "eblup": float(pred.mu[i]),
                "effect": float(v_hat[i]),
                "icc": icc(fit.delta, int(dataset.sizes[i])),
            }
            for i in range(m)
        ],
        "conditions": {
            "finite_inputs": True,
            "few_observations_per_cluster": bool(int(dataset.sizes.max()) < m),
            "max_abs_residual_coefficient": float(np.abs(comp.d).max()),
            "max_abs_weight_derivative": float(max(
                np.abs(b.X.T @ comp.db[i]).max()
                for i, b in enumerate(dataset.blocks))),
            "linear_in_delta": bool(struct.linear_in_delta),
            "d1_h_deviation": diag.max_h_deviation,
            "d1_l_deviation": diag.max_l_deviation,
            "d2_precision_deviation": diag.max_precision_deviation,
            "c1_effect_sum": float(abs(v_hat.sum()) / np.sqrt(m)),
            "c2_effect_square_sum": float(
                abs((v_hat**2 - fit.delta[0]).sum()) / np.sqrt(m)),
        },
    }
    _emit(report, args, "fit")
    return EXIT_OK


def cmd_predict(args) -> int:
    config = load_config(args.config)
    dataset, struct, targets = build_ner(read_table(args.data))
    fit = _fit_from_config(dataset, struct, config)
    pred = eblup(dataset, struct, targets, fit)
    report = {
        "estimator": fit.method,
        "delta": fit.delta,
        "kind": pred.kind,
        "converged": pred.converged,
        "clusters": [
            {"id": dataset.ids[i], "prediction": float(pred.mu[i])}
            for i in range(dataset.m)
        ],
    }
    _emit(report, args, "predict")
    return EXIT_OK


def _index_of(labels: list[str], label: str) -> int:
    try:
        return labels.index(label)
    except ValueError:
        raise StructuralError(f"unknown cluster label {label!r}") from None


def build_contrast(config_test: dict, labels: list[str]) -> LinearHypothesis:
    m = len(labels)
    a = np.array(config_test.get("a", np.zeros(m)), dtype=float)
    if "L" in config_test:
        L = np.array(config_test["L"], dtype=float)
        return LinearHypothesis(L=L, a=a)
    builder = config_test.get("builder")
    if builder == "within-subset-contrasts":
        subset = [_index_of(labels, s) for s in config_test["subset"]]
        k = len(subset)
        L = np.zeros((k - 1, m))
        for r in range(k - 1):
            L[r, subset[r]] += 1.0
            L[r, subset] -= 1.0 / k
        return LinearHypothesis(L=L, a=a)
    if builder == "paired-difference":
        pairs = config_test["pairs"]
        L = np.zeros((len(pairs), m))
        for r, (one, other) in enumerate(pairs):
            L[r, _index_of(labels, one)] = 1.0
            L[r, _index_of(labels, other)] = -1.0
        return LinearHypothesis(L=L, a=a)
    raise StructuralError("test config needs either 'L' or a known 'builder'")


def _test_pair(dataset, struct, targets, fit, hyp, alpha):
    """Marginal and conditional linear tests side by side."""
    mu_hat = eblup(dataset, struct, targets, fit).mu
    cov_m = sigma_marginal(dataset, struct, targets, fit)
    res_m = test_linear(hyp, mu_hat, cov_m, alpha)
    cov_c = sigma_conditional(dataset, struct, targets, fit)
    cond = ConditionalContext(
        amatrix=a_matrix(dataset, struct, targets, fit.delta),
        dataset=dataset, struct=struct, beta=fit.beta_hat, delta=fit.delta,
    )
    res_c = test_linear(hyp, mu_hat, cov_c, alpha, cond=cond)
    return mu_hat, cov_m, cov_c, cond, res_m, res_c


def _test_report(res, law: str) -> dict:
    return {
        "law": law,
        "statistic": res.statistic,
        "df": res.df,
        "noncentrality": res.noncentrality,
        "threshold": res.threshold,
        "p_value": res.p_value,
        "reject": res.reject,
    }


def cmd_test(args) -> int:
    config = load_config(args.config)
    if "test" not in config:
        raise StructuralError("config needs a 'test' section")
    dataset, struct, targets = build_ner(read_table(args.data))
    fit = _fit_from_config(dataset, struct, config)
    hyp = build_contrast(config["test"], dataset.ids)
    alpha = args.alpha if args.alpha is not None else config.get("alpha", 0.05)
    _, _, _, _, res_m, res_c = _test_pair(dataset, struct, targets, fit, hyp, alpha)
    report = {
        "alpha": alpha,
        "u": hyp.u,
        "marginal": _test_report(res_m, "marginal"),
        "conditional": _test_report(res_c, "conditional"),
    }
    for row in ("marginal", "conditional"):
        r = report[row]
        print(
            f"{row:>11}: stat={r['statistic']:.4f} df={r['df']} "
            f"lambda={r['noncentrality']:.4g} thr={r['threshold']:.4f} "
            f"p={r['p_value']:.4g} reject={r['reject']}",
            file=sys.stderr,
        )
    _emit(report, args, "test")
    return EXIT_OK


def cmd_tukey(args) -> int:
    config = load_config(args.config)
    if "tukey" not in config:
        raise StructuralError("config needs a 'tukey' section")
    dataset, struct, targets = build_ner(read_table(args.data))
    subset_labels = config["tukey"]["subset"]
    if len(subset_labels) < 2:
        raise StructuralError("tukey subset needs at least two clusters")
    subset = [_index_of(dataset.ids, s) for s in subset_labels]
    fit = _fit_from_config(dataset, struct, config)
    alpha = args.alpha if args.alpha is not None else config.get("alpha", 0.05)
    mu_hat = eblup(dataset, struct, targets, fit).mu
    cov_c = sigma_conditional(dataset, struct, targets, fit, attach_lambda=False)
    diag = check_tukey_conditions(dataset, struct, targets, fit.delta)
    result = tukey_all_pairs(mu_hat, cov_c, subset, alpha, diagnostics=diag)
    ordered = sorted(
        result.contrasts,
        key=lambda c: (-c.statistic, dataset.ids[c.i], dataset.ids[c.j]),
    )
    report = {
        "alpha": alpha,
        "m_prime": result.m_prime,
        "threshold": result.threshold,
        "similarity_ok": bool(diag.passed),
        "contrasts": [
            {
                "first": dataset.ids[c.i],
                "second": dataset.ids[c.j],
                "statistic": c.statistic,
                "p_value": c.p_value,
                "reject": c.reject,
            }
            for c in ordered
        ],
    }
    for c in ordered[:10]:
        print(
            f"{dataset.ids[c.i]:>12} vs {dataset.ids[c.j]:<12} "
            f"stat={c.statistic:.4f} p={c.p_value:.4g} reject={c.reject}",
            file=sys.stderr,
        )
    _emit(report, args, "tukey")
    return EXIT_OK


def cmd_project(args) -> int:
    config = load_config(args.config)
    if "test" not in config or "project" not in config:
        raise StructuralError("config needs 'test' and 'project' sections")
    dataset, struct, targets = build_ner(read_table(args.data))
    fit = _fit_from_config(dataset, struct, config)
    hyp = build_contrast(config["test"], dataset.ids)
    alpha = args.alpha if args.alpha is not None else config.get("alpha", 0.05)
    law = config.get("law", "marginal")
    mu_hat, cov_m, cov_c, cond, _, _ = _test_pair(
        dataset, struct, targets, fit, hyp, alpha)
    cov = cov_m if law == "marginal" else cov_c
    designated = [_index_of(dataset.ids, s) for s in config["project"]["designated"]]
    result = project_onto_ellipsoid(
        hyp, mu_hat, cov, alpha, designated=designated,
        cond=cond if law == "conditional" else None)
    if not result.adjusted:
        print("test does not reject; nothing to project", file=sys.stderr)
        return EXIT_NOTHING
    report = {
        "alpha": alpha,
        "law": law,
        "statistic": result.statistic_before,
        "threshold": result.threshold,
        "statistic_after": result.statistic_after,
        "scale": result.scale,
        "adjustments": [
            {
                "cluster": dataset.ids[designated[r]],
                "row": r,
                "contrast_shift": float(result.row_adjustments[r]),
                "coordinate_delta": float(result.coordinate_deltas[r]),
            }
            for r in range(hyp.u)
        ],
        "total_adjustment": float(np.sum(np.abs(result.coordinate_deltas))),
    }
    _emit(report, args, "project")
    return EXIT_OK


def _sim_config_from(args, sim: dict) -> SimConfig:
    seed = args.seed if args.seed is not None else sim.get("seed")
    if seed is None:
        raise StructuralError("simulate needs a seed (config or --seed)")
    reps = sim.get("reps")
    if reps is None:
        reps = 1000 if args.fast else 5000
    n_i = sim["n_i"]
    if "n_j" in sim:
        n_i = two_group_sizes(sim["m"], int(n_i), int(sim["n_j"]))
    return SimConfig(
        m=sim["m"],
        n_i=n_i,
        sigma_v2=sim["sigma_v2"],
        sigma_e2=sim["sigma_e2"],
        reps=int(reps),
        seed=int(seed),
        alpha=args.alpha if args.alpha is not None else 0.05,
        law=sim.get("law", "conditional"),
        estimator=sim.get("estimator", "reml"),
        oracle_lambda=bool(sim.get("oracle_lambda", False)),
        threads=args.threads,
    )


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    if "simulate" not in config:
        raise StructuralError("config needs a 'simulate' section")
    sim = config["simulate"]
    cfg = _sim_config_from(args, sim)
    mode = sim.get("mode", "coverage")
    out = Path(args.out or ".")
    if mode in ("coverage", "marginal-table"):
        if mode == "marginal-table":
            reports = run_marginal_table([cfg])
        else:
            reports = [run_coverage(cfg)]
        rows = [row for rep in reports for row in rep.rows()]
        _write_csv(out / "coverage.csv", rows)
        print(json.dumps(rows, indent=2, default=_json_default))
    elif mode == "clusterwise":
        report = run_clusterwise(cfg)
        rows = [
            {
                "cluster": i,
                "effect": float(report.v[i]),
                "coverage": float(report.per_cluster[i]),
                "theoretical": float(report.theoretical[i]),
            }
            for i in range(cfg.m)
        ]
        _write_csv(out / "coverage.csv", rows)
        summary = {
            "average": report.average,
            "theoretical_average": report.theoretical_average,
        }
        print(json.dumps({"summary": summary, "clusters": rows}, indent=2,
                         default=_json_default))
    elif mode in ("power-linear", "power-tukey"):
        deltas = sim.get("deltas", [0.0, 0.5, 1.0, 2.0])
        if mode == "power-linear":
            points = run_power_linear(cfg, deltas)
        else:
            points = run_power_tukey(cfg, deltas, w=sim.get("subset_size"))
        rows = [
            {"delta": p.delta, "method": p.method, "power": p.power, "se": p.se}
            for p in points
        ]
        _write_csv(out / "power.csv", rows)
        print(json.dumps(rows, indent=2, default=_json_default))
    else:
        raise StructuralError(f"unknown simulate mode {mode!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmminfer",
        description="Simultaneous inference for mixed parameters in linear "
                    "mixed models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (
        ("fit", cmd_fit),
        ("predict", cmd_predict),
        ("test", cmd_test),
        ("tukey", cmd_tukey),
        ("project", cmd_project),
        ("simulate", cmd_simulate),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--data", help="CSV data file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--alpha", type=float, default=None,
                       help="level of the tests (default 0.05)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--fast", action="store_true",
                       help="reduced replication count for simulations")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("fit", "predict", "test", "tukey", "project") and not args.data:
        print("error: --data is required", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except NothingToDoError as exc:
        print(f"nothing to do: {exc}", file=sys.stderr)
        return EXIT_NOTHING
    except StructuralError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DegenerateCovarianceError, RankError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LmmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
