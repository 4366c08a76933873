"""Semi-synthetic benchmark: data generation, a LATE oracle, and Monte
Carlo comparison of nudge designs.

The generator plants exponential compliance curves on a uniform risk
score, a known treatment-effect vector gamma, and a configurable
baseline f(X), so every estimate can be scored against an analytic
target.  Each Monte Carlo replication runs the full pipeline: pilot at
e_z = 1/2, compliance fit, design on the main-study covariates, main
draw, merged estimation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .compliance import complier_mean, fit_compliance, predict_probs
from .design import (
    ConstraintSet,
    DesignProblem,
    GainConstraint,
    SolverOptions,
    closed_form_unconstrained,
    objective,
    rdd_design,
    solve,
)
from .errors import DomainViolation, InvalidCurve, NudgeDesignError
from .estimation import EstimatorSpec, make_estimator
from .model import ComplianceProbabilities, EncouragementDataset, NudgePropensity

__all__ = [
    "DEFAULT_GAMMA",
    "CurveParams",
    "DgpConfig",
    "DesignStrategy",
    "CellResult",
    "SimulationReport",
    "generate_covariates",
    "compliance_curves",
    "baseline_values",
    "generate_dataset",
    "true_late",
    "run_monte_carlo",
    "emit_report",
]

# treatment-effect coefficients, column order: intercept, five standardized
# covariates, risk score
DEFAULT_GAMMA = (-6.35, -32.31, -10.65, 11.19, -2.59, 62.03, -3.40)

_BASELINES = ("affine", "smooth-nonlinear", "zero")


@dataclass(frozen=True)
class CurveParams:
    """Compliance-curve shape: p_at(r) = a e^{-b(1-r)} + floor and the
    mirror image for p_nt."""

    a: float = 0.8
    b: float = 5.0
    floor: float = 0.05


@dataclass(frozen=True)
class DgpConfig:
    n: int = 1000
    d: int = 7
    gamma_true: tuple = DEFAULT_GAMMA
    baseline_fn: str = "smooth-nonlinear"
    baseline_params: tuple | None = None
    curves: CurveParams = field(default_factory=CurveParams)
    noise_var: float = 20.0
    class_shift: float = 10.0
    seed: int = 0
    score_col: int | None = None
    pilot_fraction: float = 0.2

    def __post_init__(self):
        if self.n < 1:
            raise DomainViolation("n must be positive")
        if self.d < 2:
            raise DomainViolation("need d >= 2 (intercept plus score)")
        gamma = tuple(float(g) for g in self.gamma_true)
        if len(gamma) != self.d:
            raise DomainViolation(f"gamma_true has {len(gamma)} entries, d={self.d}")
        object.__setattr__(self, "gamma_true", gamma)
        score_col = self.d - 1 if self.score_col is None else self.score_col
        if not (1 <= score_col < self.d):
            raise DomainViolation(
                "score_col must index a non-intercept column"
            )
        object.__setattr__(self, "score_col", score_col)
        if self.baseline_fn not in _BASELINES:
            raise DomainViolation(f"unknown baseline_fn '{self.baseline_fn}'")
        if self.baseline_fn == "smooth-nonlinear" and self.d < 4:
            raise DomainViolation("smooth-nonlinear baseline needs d >= 4")
        if self.baseline_fn == "affine":
            params = (
                tuple(float(c) for c in self.baseline_params)
                if self.baseline_params is not None
                else (1.0,) * self.d
            )
            if len(params) != self.d:
                raise DomainViolation("baseline_params must have d entries")
            object.__setattr__(self, "baseline_params", params)
        if self.noise_var < 0.0:
            raise DomainViolation("noise_var must be nonnegative")
        if not (0.0 < self.pilot_fraction < 1.0):
            raise DomainViolation("pilot_fraction must lie in (0,1)")
        # curves must stay a valid probability triple on the whole score range
        compliance_curves(np.linspace(0.0, 1.0, 1001), self.curves)


def _covariates(n: int, d: int, score_col: int, rng) -> np.ndarray:
    """Intercept column, standard normal block, then the shuffled
    rank-uniform score; RNG order is normals first, permutation second."""
    X = np.empty((n, d))
    X[:, 0] = 1.0
    other = [j for j in range(1, d) if j != score_col]
    if other:
        X[:, other] = rng.standard_normal((n, len(other)))
    scores = np.arange(1, n + 1) / (n + 1.0)
    X[:, score_col] = scores[rng.permutation(n)]
    return X


def generate_covariates(config: DgpConfig, rng) -> np.ndarray:
    return _covariates(config.n, config.d, config.score_col, rng)


def compliance_curves(score, params: CurveParams | None = None) -> ComplianceProbabilities:
    """Evaluate the exponential always-/never-taker curves on scores in
    [0,1]; compliers get the remainder."""
    params = params if params is not None else CurveParams()
    r = np.asarray(score, dtype=float)
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise DomainViolation("scores must lie in [0,1]")
    p_at = params.a * np.exp(-params.b * (1.0 - r)) + params.floor
    p_nt = params.a * np.exp(-params.b * r) + params.floor
    p_c = 1.0 - p_at - p_nt
    if np.any(p_c <= 0.0):
        raise InvalidCurve(
            "curve parameters leave no complier mass somewhere on the score range"
        )
    return ComplianceProbabilities(p_at=p_at, p_nt=p_nt, p_c=p_c)


def baseline_values(config: DgpConfig, X: np.ndarray) -> np.ndarray:
    """f(X) under the configured tag."""
    if config.baseline_fn == "zero":
        return np.zeros(X.shape[0])
    if config.baseline_fn == "affine":
        return X @ np.asarray(config.baseline_params)
    r = X[:, config.score_col]
    return 5.0 * np.sin(np.pi * r) + 2.0 * X[:, 2] ** 2 - 3.0 * X[:, 3]


def generate_dataset(
    config: DgpConfig, e_z, rng, X: np.ndarray | None = None
) -> EncouragementDataset:
    """Draw one study.  Z ~ Bernoulli(e_z); class ~ Categorical(p_nt, p_c,
    p_at); W = Z for compliers, 1 for always-takers, else 0; Y adds the
    baseline, the treatment term, the +-class_shift confounders, and
    Gaussian noise.  Draw order: covariates (unless supplied), Z, class,
    noise."""
    if X is None:
        X = generate_covariates(config, rng)
    n = X.shape[0]
    if isinstance(e_z, NudgePropensity):
        e = e_z.e_z
    else:
        e = np.asarray(e_z, dtype=float)
        if e.ndim == 0:
            e = np.full(n, float(e))
    if e.ndim != 1 or e.shape[0] != n:
        raise DomainViolation("e_z length does not match the covariate rows")
    if np.any(e < 0.0) or np.any(e > 1.0):
        raise DomainViolation("e_z entries must lie in [0,1]")

    probs = compliance_curves(X[:, config.score_col], config.curves)
    Z = (rng.random(n) < e).astype(float)
    u = rng.random(n)
    is_nt = u < probs.p_nt
    is_c = ~is_nt & (u < probs.p_nt + probs.p_c)
    is_at = ~(is_nt | is_c)
    W = np.where(is_at, 1.0, np.where(is_c, Z, 0.0))
    noise = rng.standard_normal(n) * math.sqrt(config.noise_var)
    Y = (
        baseline_values(config, X)
        + W * (X @ np.asarray(config.gamma_true))
        + config.class_shift * (is_at.astype(float) - is_nt.astype(float))
        + noise
    )
    return EncouragementDataset(X=X, Z=Z, W=W, Y=Y, score_col=config.score_col)


def true_late(
    config: DgpConfig, n_oracle: int = 1_000_000, seed: int = 0
) -> tuple[float, float]:
    """Analytic target tau = E[X | complier]' gamma by complier-weighted
    averaging over a fresh oracle draw; returns (value, MC standard error)."""
    if n_oracle < 2:
        raise DomainViolation("n_oracle must be at least 2")
    rng = np.random.default_rng([seed])
    X = _covariates(n_oracle, config.d, config.score_col, rng)
    probs = compliance_curves(X[:, config.score_col], config.curves)
    t = X @ np.asarray(config.gamma_true)
    w = probs.p_c
    tau = float(w @ t / w.sum())
    # ratio-estimator standard error via linearization
    resid = w * (t - tau)
    se = float(np.std(resid, ddof=1) / (math.sqrt(n_oracle) * np.mean(w)))
    return tau, se


@dataclass(frozen=True)
class DesignStrategy:
    """Named recipe mapping main-study covariates and pilot-estimated
    compliance to a nudge propensity.

    kinds: "rct" (constant value), "rdd" (deterministic top-score rule at
    the budget), "closed-form" (unconstrained row-wise optimum),
    "optimal" (solver under the listed constraints).
    """

    name: str
    kind: str
    value: float = 0.5
    budget: float | None = None
    monotone: bool = False
    gain_rho: float | None = None

    def __post_init__(self):
        if self.kind not in ("rct", "rdd", "closed-form", "optimal"):
            raise DomainViolation(f"unknown design kind '{self.kind}'")
        if self.kind == "rct" and not (0.0 <= self.value <= 1.0):
            raise DomainViolation("rct value must lie in [0,1]")
        if self.kind == "rdd" and self.budget is None:
            raise DomainViolation("rdd strategy requires a budget")


def _apply_strategy(
    strategy: DesignStrategy,
    problem: DesignProblem,
    score: np.ndarray,
    opts: SolverOptions | None = None,
) -> tuple[NudgePropensity, float, float]:
    """Returns (e_z, criterion value, ratio to the unconstrained optimum)."""
    probs = problem.probs
    if strategy.kind == "rct":
        e = NudgePropensity(e_z=np.full(problem.n, strategy.value))
    elif strategy.kind == "rdd":
        e = rdd_design(score, strategy.budget, probs)
    elif strategy.kind == "closed-form":
        e = closed_form_unconstrained(probs)
    else:
        gain = (
            GainConstraint(rho=strategy.gain_rho, score=score)
            if strategy.gain_rho is not None
            else None
        )
        cons = ConstraintSet(
            budget=strategy.budget,
            monotone_in_score=strategy.monotone,
            score=score if strategy.monotone else None,
            gain=gain,
        )
        e = solve(problem, cons, opts).e_z_star
    obj = objective(e, problem)
    unconstrained = objective(closed_form_unconstrained(probs), problem)
    return e, obj, obj / unconstrained


@dataclass(frozen=True)
class CellResult:
    design: str
    n: int
    mean: float
    variance: float
    mse: float
    bias: float
    count: int
    failures: int
    objective_mean: float
    ratio_mean: float


@dataclass(frozen=True)
class SimulationReport:
    cells: tuple
    true_tau: float
    true_tau_se: float
    design_names: tuple
    n_grid: tuple
    replications: int


def _run_task(args):
    (config, strategy, di, ni, n, rep, est_spec, seed) = args
    rng = np.random.default_rng([seed, di, ni, rep])
    try:
        n_pilot = int(round(config.pilot_fraction * n))
        n_pilot = min(max(n_pilot, 2), n - 2)
        n_main = n - n_pilot
        X_p = _covariates(n_pilot, config.d, config.score_col, rng)
        pilot = generate_dataset(config, 0.5, rng, X=X_p)
        cm = fit_compliance(pilot)
        X_m = _covariates(n_main, config.d, config.score_col, rng)
        probs_m = predict_probs(cm, X_m)
        xbar = complier_mean(X_m, probs_m)
        problem = DesignProblem(X=X_m, probs=probs_m, x_bar_c=xbar.x_bar_c)
        e_m, obj, ratio = _apply_strategy(strategy, problem, X_m[:, config.score_col])
        main = generate_dataset(config, e_m, rng, X=X_m)
        merged = pilot.concat(main)
        e_full = np.concatenate([np.full(n_pilot, 0.5), e_m.e_z])
        est = make_estimator(est_spec)(merged, e_full)
        return (di, ni, rep, est.tau_late, obj, ratio, None)
    except NudgeDesignError as exc:
        return (di, ni, rep, math.nan, math.nan, math.nan, type(exc).__name__)


def run_monte_carlo(
    config: DgpConfig,
    designs,
    n_grid,
    R: int,
    estimator: EstimatorSpec | None = None,
    seed: int = 0,
    threads: int = 1,
    n_oracle: int = 1_000_000,
) -> SimulationReport:
    """Full benchmark.  Replication (design di, size ni, rep) draws from
    the stream keyed (seed, di, ni, rep), so cells are reproducible and
    order-independent; aggregation runs in fixed task order."""
    designs = list(designs)
    n_grid = [int(v) for v in n_grid]
    if R < 2:
        raise DomainViolation("R must be at least 2")
    if not designs or not n_grid:
        raise DomainViolation("need at least one design and one n")
    names = [s.name for s in designs]
    if len(set(names)) != len(names):
        raise DomainViolation("design names must be unique")
    est_spec = estimator if estimator is not None else EstimatorSpec()

    true_tau, true_se = true_late(config, n_oracle=n_oracle, seed=seed)

    tasks = [
        (config, strategy, di, ni, n, rep, est_spec, seed)
        for di, strategy in enumerate(designs)
        for ni, n in enumerate(n_grid)
        for rep in range(R)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_task, tasks, chunksize=8))
    else:
        rows = [_run_task(t) for t in tasks]

    by_cell: dict[tuple[int, int], list] = {}
    for row in rows:
        by_cell.setdefault((row[0], row[1]), []).append(row)

    cells = []
    for di, strategy in enumerate(designs):
        for ni, n in enumerate(n_grid):
            cell_rows = sorted(by_cell.get((di, ni), []), key=lambda r: r[2])
            taus = np.array([r[3] for r in cell_rows if r[6] is None])
            objs = np.array([r[4] for r in cell_rows if r[6] is None])
            ratios = np.array([r[5] for r in cell_rows if r[6] is None])
            count = taus.size
            failures = len(cell_rows) - count
            if count:
                mean = float(np.mean(taus))
                variance = float(np.var(taus))
                mse = float(np.mean((taus - true_tau) ** 2))
                bias = mean - true_tau
                obj_mean = float(np.mean(objs))
                ratio_mean = float(np.mean(ratios))
            else:
                mean = variance = mse = bias = obj_mean = ratio_mean = math.nan
            cells.append(
                CellResult(
                    design=strategy.name,
                    n=n,
                    mean=mean,
                    variance=variance,
                    mse=mse,
                    bias=bias,
                    count=count,
                    failures=failures,
                    objective_mean=obj_mean,
                    ratio_mean=ratio_mean,
                )
            )
    return SimulationReport(
        cells=tuple(cells),
        true_tau=true_tau,
        true_tau_se=true_se,
        design_names=tuple(names),
        n_grid=tuple(n_grid),
        replications=R,
    )


_FLOAT_FMT = "%.17g"
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def emit_report(report: SimulationReport, out_dir: str) -> list[str]:
    """Write results.csv, objectives.csv, and variance/MSE SVG line plots;
    returns the paths written."""
    if not report.cells:
        raise DomainViolation("report has no cells")
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    results_path = os.path.join(out_dir, "results.csv")
    with open(results_path, "w", newline="") as fh:
        fh.write("design,n,metric,value\n")
        for cell in report.cells:
            for metric in ("mean", "variance", "mse", "bias"):
                value = _FLOAT_FMT % getattr(cell, metric)
                fh.write(f"{cell.design},{cell.n},{metric},{value}\n")
            fh.write(f"{cell.design},{cell.n},count,{cell.count}\n")
            fh.write(f"{cell.design},{cell.n},failures,{cell.failures}\n")
    paths.append(results_path)

    objectives_path = os.path.join(out_dir, "objectives.csv")
    with open(objectives_path, "w", newline="") as fh:
        fh.write("design,n,objective,ratio\n")
        for cell in report.cells:
            fh.write(
                f"{cell.design},{cell.n},"
                f"{_FLOAT_FMT % cell.objective_mean},{_FLOAT_FMT % cell.ratio_mean}\n"
            )
    paths.append(objectives_path)

    for metric in ("variance", "mse"):
        path = os.path.join(out_dir, f"{metric}.svg")
        with open(path, "w") as fh:
            fh.write(_line_plot_svg(report, metric))
        paths.append(path)
    return paths


def _line_plot_svg(report: SimulationReport, metric: str) -> str:
    """Hand-rolled standalone SVG: one polyline per design over the n
    grid."""
    width, height = 640, 420
    ml, mr, mt, mb = 70, 150, 40, 50
    plot_w, plot_h = width - ml - mr, height - mt - mb

    series = {}
    for name in report.design_names:
        pts = [
            (cell.n, getattr(cell, metric))
            for cell in report.cells
            if cell.design == name and math.isfinite(getattr(cell, metric))
        ]
        series[name] = sorted(pts)

    xs = sorted(report.n_grid)
    ys = [v for pts in series.values() for (_, v) in pts]
    x_lo, x_hi = float(min(xs)), float(max(xs))
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1.0, x_hi + 1.0
    y_lo = min(ys) if ys else 0.0
    y_hi = max(ys) if ys else 1.0
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return ml + (v - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v):
        return mt + plot_h - (v - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="{mt - 16}" font-size="14">{metric} of the LATE '
        f"estimate by design</text>",
        f'<line x1="{ml}" y1="{mt + plot_h}" x2="{ml + plot_w}" y2="{mt + plot_h}" '
        'stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + plot_h}" stroke="black"/>',
    ]
    for n in xs:
        x = sx(n)
        parts.append(
            f'<line x1="{x:.2f}" y1="{mt + plot_h}" x2="{x:.2f}" '
            f'y2="{mt + plot_h + 4}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{mt + plot_h + 18}" text-anchor="middle">{n}</text>'
        )
    for k in range(5):
        v = y_lo + (y_hi - y_lo) * k / 4.0
        y = sy(v)
        parts.append(
            f'<line x1="{ml - 4}" y1="{y:.2f}" x2="{ml}" y2="{y:.2f}" stroke="black"/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.2f}" text-anchor="end">{v:.3g}</text>'
        )
    for i, name in enumerate(report.design_names):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(n):.2f},{sy(v):.2f}" for n, v in series[name])
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="2" '
            f'points="{pts}"/>'
        )
        for n, v in series[name]:
            parts.append(
                f'<circle cx="{sx(n):.2f}" cy="{sy(v):.2f}" r="3" fill="{color}"/>'
            )
        ly = mt + 16 * i
        parts.append(
            f'<line x1="{ml + plot_w + 10}" y1="{ly}" x2="{ml + plot_w + 30}" '
            f'y2="{ly}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{ml + plot_w + 35}" y="{ly + 4}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
