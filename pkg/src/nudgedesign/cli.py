"""Command-line front end for the two-stage pipeline.

Subcommands mirror the workflow: fit-pilot (compliance model from the
pilot study), design (nudge propensities for the main-study cohort),
estimate (LATE from the merged data), simulate (the Monte Carlo
benchmark).  Stage artifacts are plain files so the stages can run weeks
apart.

Exit codes: 0 success, 1 computational failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np
from scipy.special import expit

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .compliance import (
    DEFAULT_CLIP_EPSILON,
    DEFAULT_RIDGE_LAMBDA,
    ComplianceModel,
    complier_mean,
    fit_compliance,
    predict_probs,
)
from .design import (
    ConstraintSet,
    DesignProblem,
    GainConstraint,
    closed_form_unconstrained,
    objective,
    regularize_variances,
    solve,
)
from .errors import (
    DimensionMismatch,
    DomainViolation,
    FoldTooSmall,
    InvalidCurve,
    LengthMismatch,
    MalformedCsv,
    NudgeDesignError,
    SchemaViolation,
)
from .estimation import (
    EstimatorSpec,
    bootstrap_ci,
    estimate_gamma_wls,
    estimate_variance_fn,
    fit_outcome_model,
    make_estimator,
)
from .model import load_covariates, load_dataset
from .simulation import (
    CurveParams,
    DesignStrategy,
    DgpConfig,
    emit_report,
    run_monte_carlo,
)

__all__ = ["main"]

_VALIDATION_ERRORS = (
    MalformedCsv,
    SchemaViolation,
    DomainViolation,
    LengthMismatch,
    DimensionMismatch,
    InvalidCurve,
    FoldTooSmall,
)

_FMT = "%.17g"


def _load_toml(path) -> dict:
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise SchemaViolation(f"{path}: {exc}") from None


def _check_keys(table: dict, allowed, where: str) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise SchemaViolation(f"unknown keys in {where}: {unknown}")


def _parse_schema_text(text: str) -> dict:
    """Compact schema syntax: "x=a+b+c,z=nudge,w=treated,y=out,score=b"
    with a bare "intercept" token to prepend a ones column."""
    schema: dict = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            if part == "intercept":
                schema["intercept"] = True
                continue
            raise SchemaViolation(f"cannot parse schema fragment '{part}'")
        key, _, val = part.partition("=")
        key, val = key.strip(), val.strip()
        if key == "x":
            schema["x"] = [c.strip() for c in val.split("+") if c.strip()]
        elif key in ("z", "w", "y", "score"):
            schema[key] = val
        elif key == "intercept":
            schema["intercept"] = val.lower() in ("1", "true", "yes")
        else:
            raise SchemaViolation(f"unknown schema role '{key}'")
    return schema


def _resolve_schema(flag_value, file_cfg: dict):
    if flag_value is not None:
        return _parse_schema_text(flag_value)
    raw = file_cfg.get("schema")
    if raw is None:
        raise SchemaViolation("no schema given (--schema or config file)")
    if isinstance(raw, str):
        return _parse_schema_text(raw)
    if isinstance(raw, dict):
        _check_keys(raw, ("x", "z", "w", "y", "score", "intercept"), "schema")
        return dict(raw)
    raise SchemaViolation("schema must be a string or a table")


def _pick(flag_value, file_cfg: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    return file_cfg.get(key, default)


def _require_out(args, file_cfg: dict) -> str:
    out = _pick(args.out, file_cfg, "out", None)
    if out is None:
        raise SchemaViolation("no output path given (--out or config file)")
    return out


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2))
        fh.write("\n")


def cmd_fit_pilot(args) -> int:
    file_cfg = _load_toml(args.config) if args.config else {}
    _check_keys(
        file_cfg, ("schema", "out", "ridge_lambda", "clip_epsilon"), "config"
    )
    schema = _resolve_schema(args.schema, file_cfg)
    out = _require_out(args, file_cfg)
    lam = float(_pick(args.ridge_lambda, file_cfg, "ridge_lambda", DEFAULT_RIDGE_LAMBDA))
    eps = float(_pick(args.clip_epsilon, file_cfg, "clip_epsilon", DEFAULT_CLIP_EPSILON))

    data = load_dataset(args.pilot_csv, schema)
    model = fit_compliance(data, ridge_lambda=lam, clip_epsilon=eps)
    model.save(out)

    probs = predict_probs(model, data.X)
    raw_at = expit(data.X @ model.beta_z0)
    floored = int(np.sum(probs.p_c <= model.clip_epsilon))
    at_clipped = int(np.sum(probs.p_at != raw_at))
    n0 = int(np.sum(data.Z == 0.0))
    print(f"pilot rows: {data.n} (z=0: {n0}, z=1: {data.n - n0})")
    print(
        f"p_c floored at {model.clip_epsilon:g} in {floored} rows; "
        f"p_at clipped in {at_clipped} rows"
    )
    print(f"wrote {out}")
    return 0


def cmd_design(args) -> int:
    file_cfg = _load_toml(args.config) if args.config else {}
    _check_keys(
        file_cfg,
        ("schema", "out", "budget", "monotone", "gain_rho"),
        "config",
    )
    cons_cfg = _load_toml(args.constraints) if args.constraints else {}
    _check_keys(cons_cfg, ("budget", "monotone", "gain_rho"), "constraints file")

    schema = _resolve_schema(args.schema, file_cfg)
    out = _require_out(args, file_cfg)

    def pick_cons(flag, key, default):
        if flag is not None:
            return flag
        if key in cons_cfg:
            return cons_cfg[key]
        return file_cfg.get(key, default)

    budget = pick_cons(args.budget, "budget", None)
    monotone = bool(pick_cons(args.monotone, "monotone", False))
    gain_rho = pick_cons(args.gain_rho, "gain_rho", None)

    X, score_col, _names = load_covariates(args.cohort_csv, schema)
    model = ComplianceModel.load(args.model_json)
    probs = predict_probs(model, X)
    xbar = complier_mean(X, probs)
    problem = DesignProblem(X=X, probs=probs, x_bar_c=xbar.x_bar_c)
    score = X[:, score_col]

    cons = ConstraintSet(
        budget=None if budget is None else float(budget),
        monotone_in_score=monotone,
        score=score if monotone else None,
        gain=None
        if gain_rho is None
        else GainConstraint(rho=float(gain_rho), score=score),
    )
    sol = solve(problem, cons)
    unconstrained = objective(closed_form_unconstrained(probs), problem)

    with open(out, "w", newline="", encoding="utf-8") as fh:
        fh.write("e_z\n")
        for v in sol.e_z_star.e_z:
            fh.write(_FMT % v + "\n")
    sidecar = os.path.splitext(out)[0] + ".diagnostics.json"
    _write_json(
        sidecar,
        {
            "objective": sol.objective,
            "iterations": sol.iterations,
            "kkt_residual": sol.kkt_residual,
            "projection_residual": sol.projection_residual,
            "converged": sol.converged,
            "unconstrained_objective": unconstrained,
            "inflation_ratio": sol.objective / unconstrained,
        },
    )
    print(f"wrote {out} and {sidecar}")
    print(
        f"objective {sol.objective:.6g} "
        f"(x{sol.objective / unconstrained:.4g} over unconstrained)"
    )
    return 0


def _read_design_csv(path: str, n: int) -> np.ndarray:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCsv(f"{path}: empty file") from None
        rows = list(reader)
    if "e_z" in header:
        col = header.index("e_z")
    elif len(header) == 1:
        col = 0
    else:
        raise SchemaViolation(f"{path}: no 'e_z' column in {header}")
    try:
        e = np.array([float(row[col]) for row in rows])
    except (ValueError, IndexError):
        raise MalformedCsv(f"{path}: cannot parse e_z values") from None
    if e.shape[0] != n:
        raise LengthMismatch(f"{path} has {e.shape[0]} rows, data has {n}")
    if np.any(e < 0.0) or np.any(e > 1.0):
        raise DomainViolation("e_z entries must lie in [0,1]")
    return e


def cmd_estimate(args) -> int:
    file_cfg = _load_toml(args.config) if args.config else {}
    _check_keys(
        file_cfg,
        (
            "schema",
            "out",
            "model",
            "refit",
            "method",
            "learner",
            "k_folds",
            "ridge_lambda",
            "knn_k",
            "clip_epsilon",
            "bootstrap",
            "level",
            "seed",
        ),
        "config",
    )
    schema = _resolve_schema(args.schema, file_cfg)
    if not schema.get("y"):
        raise SchemaViolation("estimation requires a 'y' role in the schema")
    out = _require_out(args, file_cfg)
    model_path = _pick(args.model, file_cfg, "model", None)
    refit = bool(_pick(args.refit, file_cfg, "refit", model_path is None))
    method = _pick(args.method, file_cfg, "method", "plugin")
    learner = _pick(args.learner, file_cfg, "learner", "ridge")
    k_folds = int(_pick(args.k_folds, file_cfg, "k_folds", 5))
    lam = float(_pick(args.ridge_lambda, file_cfg, "ridge_lambda", DEFAULT_RIDGE_LAMBDA))
    knn_k = _pick(args.knn_k, file_cfg, "knn_k", None)
    eps = float(_pick(args.clip_epsilon, file_cfg, "clip_epsilon", DEFAULT_CLIP_EPSILON))
    n_boot = int(_pick(args.bootstrap, file_cfg, "bootstrap", 0))
    level = float(_pick(args.level, file_cfg, "level", 0.95))
    seed = int(_pick(args.seed, file_cfg, "seed", 0))

    spec = EstimatorSpec(
        method=method,
        learner=learner,
        ridge_lambda=lam,
        knn_k=None if knn_k is None else int(knn_k),
        k_folds=k_folds,
        clip_epsilon=eps,
        crossfit_seed=seed,
    )
    data = load_dataset(args.full_csv, schema)
    e_z = _read_design_csv(args.design_csv, data.n)

    pilot_model = None
    if model_path is not None and not refit:
        pilot_model = ComplianceModel.load(model_path)

    diagnostics: dict = {"n": data.n, "learner": learner}
    if method == "wls":
        cm = pilot_model if pilot_model is not None else fit_compliance(
            data, ridge_lambda=lam, clip_epsilon=eps
        )
        probs = predict_probs(cm, data.X)
        outcome = fit_outcome_model(data, learner=learner, ridge_lambda=lam, knn_k=spec.knn_k)
        s0, s1 = estimate_variance_fn(
            data, outcome, probs, learner=learner, ridge_lambda=lam, knn_k=spec.knn_k
        )
        s0, s1 = regularize_variances(s0, s1)
        ratios = s1 / s0
        diagnostics["variance_ratio_min"] = float(np.min(ratios))
        diagnostics["variance_ratio_max"] = float(np.max(ratios))
        est = estimate_gamma_wls(data, probs, e_z, outcome, (s0, s1))
    else:
        est = make_estimator(spec, pilot_model)(data, e_z)

    if n_boot > 0:
        boot = bootstrap_ci(
            data,
            e_z,
            make_estimator(spec, pilot_model),
            B=n_boot,
            level=level,
            seed=seed,
        )
        est = est.with_ci(boot.lo, boot.hi, boot.level)
        diagnostics["bootstrap_redraws"] = boot.redraws
        diagnostics["bootstrap_B"] = n_boot

    payload = json.loads(est.to_json())
    payload["diagnostics"] = diagnostics
    _write_json(out, payload)
    print(f"tau_late: {est.tau_late:.6g} (method {est.method})")
    if est.ci is not None:
        print(f"{est.ci[2]:.0%} CI: [{est.ci[0]:.6g}, {est.ci[1]:.6g}]")
    print(f"wrote {out}")
    return 0


def _build_sim_inputs(cfg: dict, args):
    _check_keys(cfg, ("dgp", "run", "estimator", "designs"), "simulate config")

    dgp_tbl = dict(cfg.get("dgp", {}))
    _check_keys(
        dgp_tbl,
        (
            "d",
            "gamma_true",
            "baseline_fn",
            "baseline_params",
            "noise_var",
            "class_shift",
            "pilot_fraction",
            "score_col",
            "curves",
        ),
        "[dgp]",
    )
    curves_tbl = dict(dgp_tbl.pop("curves", {}))
    _check_keys(curves_tbl, ("a", "b", "floor"), "[dgp.curves]")

    run_tbl = dict(cfg.get("run", {}))
    _check_keys(
        run_tbl,
        ("n_grid", "replications", "seed", "threads", "n_oracle"),
        "[run]",
    )
    if "n_grid" not in run_tbl or "replications" not in run_tbl:
        raise SchemaViolation("[run] needs n_grid and replications")
    n_grid = [int(v) for v in run_tbl["n_grid"]]
    if not n_grid or any(v < 20 for v in n_grid):
        raise SchemaViolation("n_grid entries must be >= 20")
    R = int(run_tbl["replications"])

    est_tbl = dict(cfg.get("estimator", {}))
    _check_keys(
        est_tbl, ("method", "learner", "k_folds", "ridge_lambda", "knn_k"), "[estimator]"
    )
    est_spec = EstimatorSpec(
        method=est_tbl.get("method", "plugin"),
        learner=est_tbl.get("learner", "ridge"),
        ridge_lambda=float(est_tbl.get("ridge_lambda", DEFAULT_RIDGE_LAMBDA)),
        knn_k=int(est_tbl["knn_k"]) if "knn_k" in est_tbl else None,
        k_folds=int(est_tbl.get("k_folds", 5)),
    )

    designs_raw = cfg.get("designs", [])
    if not designs_raw:
        raise SchemaViolation("config needs at least one [[designs]] entry")
    designs = []
    for i, tbl in enumerate(designs_raw):
        _check_keys(
            tbl,
            ("name", "kind", "value", "budget", "monotone", "gain_rho"),
            f"[[designs]] entry {i}",
        )
        if "name" not in tbl or "kind" not in tbl:
            raise SchemaViolation(f"[[designs]] entry {i} needs name and kind")
        designs.append(
            DesignStrategy(
                name=str(tbl["name"]),
                kind=str(tbl["kind"]),
                value=float(tbl.get("value", 0.5)),
                budget=float(tbl["budget"]) if "budget" in tbl else None,
                monotone=bool(tbl.get("monotone", False)),
                gain_rho=float(tbl["gain_rho"]) if "gain_rho" in tbl else None,
            )
        )

    config = DgpConfig(
        n=max(n_grid),
        d=int(dgp_tbl.get("d", 7)),
        gamma_true=tuple(dgp_tbl["gamma_true"])
        if "gamma_true" in dgp_tbl
        else tuple([-6.35, -32.31, -10.65, 11.19, -2.59, 62.03, -3.40][: int(dgp_tbl.get("d", 7))]),
        baseline_fn=dgp_tbl.get("baseline_fn", "smooth-nonlinear"),
        baseline_params=tuple(dgp_tbl["baseline_params"])
        if "baseline_params" in dgp_tbl
        else None,
        curves=CurveParams(
            a=float(curves_tbl.get("a", 0.8)),
            b=float(curves_tbl.get("b", 5.0)),
            floor=float(curves_tbl.get("floor", 0.05)),
        ),
        noise_var=float(dgp_tbl.get("noise_var", 20.0)),
        class_shift=float(dgp_tbl.get("class_shift", 10.0)),
        pilot_fraction=float(dgp_tbl.get("pilot_fraction", 0.2)),
        score_col=int(dgp_tbl["score_col"]) if "score_col" in dgp_tbl else None,
    )

    seed = int(args.seed if args.seed is not None else run_tbl.get("seed", 0))
    threads = args.threads if args.threads is not None else run_tbl.get("threads")
    threads = int(threads) if threads is not None else (os.cpu_count() or 1)
    n_oracle = int(run_tbl.get("n_oracle", 1_000_000))
    return config, designs, n_grid, R, est_spec, seed, threads, n_oracle


def cmd_simulate(args) -> int:
    cfg = _load_toml(args.sim_config)
    config, designs, n_grid, R, est_spec, seed, threads, n_oracle = _build_sim_inputs(
        cfg, args
    )
    out_dir = args.out if args.out is not None else "."

    report = run_monte_carlo(
        config,
        designs,
        n_grid,
        R,
        estimator=est_spec,
        seed=seed,
        threads=threads,
        n_oracle=n_oracle,
    )
    paths = emit_report(report, out_dir)

    print(f"true tau_late: {report.true_tau:.6g} (oracle SE {report.true_tau_se:.2g})")
    header = f"{'design':<20}{'n':>8}{'mean':>12}{'variance':>12}{'mse':>12}{'bias':>12}{'count':>8}{'fail':>6}"
    print(header)
    for cell in report.cells:
        print(
            f"{cell.design:<20}{cell.n:>8}{cell.mean:>12.4g}{cell.variance:>12.4g}"
            f"{cell.mse:>12.4g}{cell.bias:>12.4g}{cell.count:>8}{cell.failures:>6}"
        )
    for path in paths:
        print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nudgedesign",
        description="Design and estimation for randomized encouragement studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-pilot", help="fit compliance probabilities on a pilot CSV")
    p.add_argument("pilot_csv")
    p.add_argument("--schema", help="role mapping, e.g. 'x=a+b,score=b,z=z,w=w'")
    p.add_argument("--config", help="TOML file with defaults for this subcommand")
    p.add_argument("--ridge-lambda", type=float, dest="ridge_lambda")
    p.add_argument("--clip-epsilon", type=float, dest="clip_epsilon")
    p.add_argument("--out", help="output model JSON path")
    p.set_defaults(func=cmd_fit_pilot)

    p = sub.add_parser("design", help="solve for nudge propensities on a cohort CSV")
    p.add_argument("cohort_csv")
    p.add_argument("model_json")
    p.add_argument("--schema")
    p.add_argument("--config")
    p.add_argument("--constraints", help="TOML file with budget/monotone/gain_rho")
    p.add_argument("--budget", type=float)
    p.add_argument(
        "--monotone", action=argparse.BooleanOptionalAction, default=None
    )
    p.add_argument("--gain-rho", type=float, dest="gain_rho")
    p.add_argument("--out")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("estimate", help="estimate the LATE from a completed study")
    p.add_argument("full_csv")
    p.add_argument("design_csv")
    p.add_argument("--schema")
    p.add_argument("--config")
    p.add_argument("--model", help="pilot compliance model JSON to reuse")
    p.add_argument(
        "--refit",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="refit compliance on the full data (default when no --model)",
    )
    p.add_argument("--method", choices=("plugin", "crossfit", "wls"))
    p.add_argument("--learner", choices=("ridge", "knn"))
    p.add_argument("--k-folds", type=int, dest="k_folds")
    p.add_argument("--ridge-lambda", type=float, dest="ridge_lambda")
    p.add_argument("--knn-k", type=int, dest="knn_k")
    p.add_argument("--clip-epsilon", type=float, dest="clip_epsilon")
    p.add_argument("--bootstrap", type=int, help="number of bootstrap replicates")
    p.add_argument("--level", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run the Monte Carlo benchmark")
    p.add_argument("sim_config")
    p.add_argument("--out", help="output directory (default: current)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NudgeDesignError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
