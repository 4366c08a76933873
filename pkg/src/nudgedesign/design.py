"""C-optimal design of nudge propensities.

The criterion is the plug-in variance proxy

    V(e_z) = n * x_bar_c' (X' diag(e_w (1 - e_w)) X)^{-1} x_bar_c,

with e_w = p_at + p_c * e_z the induced treatment propensity.  It is
convex in e_z, has a cheap analytic gradient, and the feasible region is
an intersection of a box, an optional budget hyperplane, an optional
monotone-in-score cone, and an optional gain halfspace, so a projected
gradient method with Dykstra projections solves it deterministically.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.isotonic import isotonic_regression

from .errors import (
    DomainViolation,
    Infeasible,
    LengthMismatch,
    NonpositiveVariance,
    PreconditionViolated,
    RatioOutOfRange,
    SingularInformation,
)
from .model import ComplianceProbabilities, NudgePropensity

__all__ = [
    "DesignProblem",
    "ConstraintSet",
    "GainConstraint",
    "DesignSolution",
    "SolverOptions",
    "objective",
    "gradient",
    "project",
    "solve",
    "closed_form_unconstrained",
    "closed_form_budget",
    "rdd_design",
    "regularize_variances",
    "objective_wls",
    "wls_weight_curvature",
]

# keep e_w off the box corners inside the solver so the information
# matrix stays positive definite there; optima satisfy overlap anyway
_EW_GUARD = 1e-6


def _as_ez(e_z) -> np.ndarray:
    if isinstance(e_z, NudgePropensity):
        return e_z.e_z
    e = np.asarray(e_z, dtype=float)
    if e.ndim != 1:
        raise DomainViolation("e_z must be a vector")
    if np.any(e < 0.0) or np.any(e > 1.0):
        raise DomainViolation("e_z entries must lie in [0,1]")
    return e


@dataclass(frozen=True)
class DesignProblem:
    """Covariates, predicted compliance, and the target direction x_bar_c."""

    X: np.ndarray
    probs: ComplianceProbabilities
    x_bar_c: np.ndarray
    scale_n: bool = True

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DomainViolation("X must be a matrix")
        n, d = X.shape
        if self.probs.n != n:
            raise LengthMismatch(f"probs length {self.probs.n}, X has {n} rows")
        x_bar = np.ascontiguousarray(self.x_bar_c, dtype=float)
        if x_bar.shape != (d,):
            raise LengthMismatch(f"x_bar_c has shape {x_bar.shape}, expected ({d},)")
        if np.linalg.matrix_rank(X) < d:
            raise SingularInformation("X must have full column rank")
        X.setflags(write=False)
        x_bar.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "x_bar_c", x_bar)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def _n_factor(self) -> float:
        return float(self.n) if self.scale_n else 1.0


@dataclass(frozen=True)
class GainConstraint:
    """Lower bound on the expected total score among encouraged rows:
    sum_i e_z[i] * score[i] >= rho * reference_sum.

    reference_sum, when not supplied, is resolved from the other
    constraints: the scores of the deterministic top-score design at the
    active budget, else the rows where the unconstrained closed form
    equals one.
    """

    rho: float
    score: np.ndarray
    reference_sum: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise DomainViolation("rho must lie in [0,1]")
        s = np.ascontiguousarray(self.score, dtype=float)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise DomainViolation("score must be a finite vector")
        s.setflags(write=False)
        object.__setattr__(self, "score", s)


@dataclass(frozen=True)
class ConstraintSet:
    """Feasible polytope: box [0,1]^n, optional budget equality on the mean
    induced treatment propensity, optional monotone-in-score cone, optional
    gain halfspace."""

    budget: float | None = None
    monotone_in_score: bool = False
    score: np.ndarray | None = None
    gain: GainConstraint | None = None

    def __post_init__(self):
        if self.budget is not None and not (0.0 <= self.budget <= 1.0):
            raise DomainViolation("budget must lie in [0,1]")
        if self.score is not None:
            s = np.ascontiguousarray(self.score, dtype=float)
            if s.ndim != 1 or not np.all(np.isfinite(s)):
                raise DomainViolation("score must be a finite vector")
            s.setflags(write=False)
            object.__setattr__(self, "score", s)
        if self.monotone_in_score and self.score is None:
            raise DomainViolation("monotone_in_score requires a score vector")


@dataclass(frozen=True)
class DesignSolution:
    """Solver output: the propensity vector plus diagnostics."""

    e_z_star: NudgePropensity
    objective: float
    iterations: int
    kkt_residual: float
    projection_residual: float
    converged: bool


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 5000
    rel_tol: float = 1e-10
    patience: int = 5
    armijo_c: float = 1e-4
    initial_step: float = 1.0
    projection_tol: float = 1e-10
    max_sweeps: int = 10_000
    kkt_tol: float = 1e-5
    # iterations count toward the patience streak only when the iterate
    # also stops moving; flat coordinates change the objective below
    # rel_tol long before they have converged themselves
    move_tol: float = 1e-12


def _information_factor(X, weights):
    """Cholesky factor of X' diag(weights) X, or SingularInformation."""
    M = (X * weights[:, None]).T @ X
    try:
        return scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularInformation(
            "information matrix not positive definite; "
            "e_w degenerate or X rank-deficient"
        ) from None


def _objective_core(e_w, prob: DesignProblem) -> float:
    w = e_w * (1.0 - e_w)
    chol = _information_factor(prob.X, w)
    s = scipy.linalg.cho_solve(chol, prob.x_bar_c, check_finite=False)
    return prob._n_factor * float(prob.x_bar_c @ s)


def _gradient_core(e_w, prob: DesignProblem) -> np.ndarray:
    w = e_w * (1.0 - e_w)
    chol = _information_factor(prob.X, w)
    s = scipy.linalg.cho_solve(chol, prob.x_bar_c, check_finite=False)
    t = prob.X @ s
    return -prob._n_factor * prob.probs.p_c * (1.0 - 2.0 * e_w) * t * t


def _direction_core(e_w, prob: DesignProblem):
    """Gradient, diagonal-Newton descent direction, and curvature weights.

    The criterion's per-coordinate curvature is
    2 n p_c^2 a_i^2 (1 + (1-2e_w)^2 k_i) with a_i = X_i' M^{-1} x_bar_c and
    k_i = X_i' M^{-1} X_i.  Dividing the gradient by it cancels the a_i^2
    factor, so rows nearly orthogonal to the target direction (which leave
    the objective almost flat) still move at full Newton rate instead of
    stalling the iteration.
    """
    w = e_w * (1.0 - e_w)
    chol = _information_factor(prob.X, w)
    s = scipy.linalg.cho_solve(chol, prob.x_bar_c, check_finite=False)
    a = prob.X @ s
    kappa = np.einsum(
        "ij,ji->i", prob.X, scipy.linalg.cho_solve(chol, prob.X.T, check_finite=False)
    )
    p_c = prob.probs.p_c
    contrast = 1.0 - 2.0 * e_w
    g = -prob._n_factor * p_c * contrast * a * a
    bend = 1.0 + contrast * contrast * kappa
    curvature = 2.0 * prob._n_factor * (p_c * a) ** 2 * bend
    direction = contrast / (2.0 * p_c * bend)
    return g, direction, curvature


def objective(e_z, prob: DesignProblem) -> float:
    """Plug-in variance criterion n * x_bar_c' M(e)^{-1} x_bar_c."""
    e = _as_ez(e_z)
    if e.shape[0] != prob.n:
        raise LengthMismatch(f"e_z length {e.shape[0]}, expected {prob.n}")
    e_w = prob.probs.p_at + prob.probs.p_c * e
    return _objective_core(e_w, prob)


def gradient(e_z, prob: DesignProblem) -> np.ndarray:
    """Analytic gradient: g[i] = -n p_c[i] (1 - 2 e_w[i]) (X_i' M^{-1} x_bar_c)^2."""
    e = _as_ez(e_z)
    if e.shape[0] != prob.n:
        raise LengthMismatch(f"e_z length {e.shape[0]}, expected {prob.n}")
    e_w = prob.probs.p_at + prob.probs.p_c * e
    return _gradient_core(e_w, prob)


def _resolve_gain_bound(cons: ConstraintSet, probs: ComplianceProbabilities) -> float:
    """Right-hand side rho * reference_sum of the gain halfspace."""
    gain = cons.gain
    if gain.reference_sum is not None:
        ref = float(gain.reference_sum)
    elif cons.budget is not None:
        ones = rdd_design(gain.score, cons.budget, probs).e_z
        ref = float(gain.score @ ones)
    else:
        ones = closed_form_unconstrained(probs).e_z == 1.0
        ref = float(gain.score[ones].sum())
    return gain.rho * ref


class _Projector:
    """Euclidean projection onto the constraint intersection via Dykstra.

    The monotone cone and the box are merged into one exact compound
    projection (clipping an isotonic fit stays isotonic and satisfies the
    intersection's optimality conditions), which keeps the cycle short.
    The box-bearing set is placed last so returned points are exactly
    inside [0,1]^n.
    """

    def __init__(self, cons: ConstraintSet, probs: ComplianceProbabilities, n: int):
        if cons.monotone_in_score and cons.score.shape[0] != n:
            raise LengthMismatch("score length does not match problem size")
        if cons.gain is not None and cons.gain.score.shape[0] != n:
            raise LengthMismatch("gain score length does not match problem size")
        self.n = n
        self.cons = cons
        self.order = (
            np.argsort(cons.score, kind="stable") if cons.monotone_in_score else None
        )

        if cons.budget is not None:
            lo = float(np.mean(probs.p_at))
            hi = float(np.mean(probs.p_at + probs.p_c))
            if not (lo - 1e-12 <= cons.budget <= hi + 1e-12):
                raise Infeasible(
                    f"budget {cons.budget} outside attainable mean treatment "
                    f"propensity range [{lo:.6g}, {hi:.6g}]"
                )
            self.budget_w = probs.p_c
            self.budget_rhs = n * cons.budget - float(np.sum(probs.p_at))
            self.budget_wsq = float(probs.p_c @ probs.p_c)
        else:
            self.budget_w = None

        if cons.gain is not None:
            self.gain_s = cons.gain.score
            self.gain_rhs = _resolve_gain_bound(cons, probs)
            self.gain_ssq = float(self.gain_s @ self.gain_s)
        else:
            self.gain_s = None

        self.last_residual = 0.0

    def _project_box(self, v, metric=None):
        # clipping is the box projection in any diagonal metric
        if self.order is None:
            return np.clip(v, 0.0, 1.0)
        kwargs = {}
        if metric is not None:
            kwargs["sample_weight"] = metric[self.order]
        out = np.empty_like(v)
        out[self.order] = isotonic_regression(
            v[self.order], y_min=0.0, y_max=1.0, increasing=True, **kwargs
        )
        return out

    def _project_budget(self, v, direction, denom):
        gap = self.budget_rhs - float(self.budget_w @ v)
        return v + (gap / denom) * direction

    def _project_gain(self, v, direction, denom):
        gap = self.gain_rhs - float(self.gain_s @ v)
        if gap <= 0.0:
            return v
        return v + (gap / denom) * direction

    def __call__(self, v, tol, max_sweeps, metric=None) -> np.ndarray:
        """Project v onto the intersection; metric=None means Euclidean,
        otherwise the norm weighted by the given positive diagonal."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise LengthMismatch(f"vector length {v.shape[0]}, expected {self.n}")

        steps = []
        if self.budget_w is not None:
            if metric is None:
                b_dir, b_den = self.budget_w, self.budget_wsq
            else:
                b_dir = self.budget_w / metric
                b_den = float(self.budget_w @ b_dir)
            steps.append(lambda x: self._project_budget(x, b_dir, b_den))
        if self.gain_s is not None:
            if metric is None:
                g_dir, g_den = self.gain_s, self.gain_ssq
            else:
                g_dir = self.gain_s / metric
                g_den = float(self.gain_s @ g_dir)
            steps.append(lambda x: self._project_gain(x, g_dir, g_den))
        steps.append(lambda x: self._project_box(x, metric))

        if len(steps) == 1:
            self.last_residual = 0.0
            return self._project_box(v, metric)

        x = v.copy()
        increments = [np.zeros(self.n) for _ in steps]
        for _ in range(max_sweeps):
            x_prev = x
            for j, proj in enumerate(steps):
                y = proj(x + increments[j])
                increments[j] = x + increments[j] - y
                x = y
            residual = float(np.max(np.abs(x - x_prev)))
            if residual < tol:
                # on an empty intersection the cycle still settles (the
                # iterates reach a limit cycle), so settling alone does not
                # certify feasibility; reject if x stays macroscopically far
                # from any halfspace or hyperplane
                dist = 0.0
                if self.budget_w is not None:
                    gap = self.budget_rhs - float(self.budget_w @ x)
                    dist = abs(gap) / float(np.sqrt(self.budget_wsq))
                if self.gain_s is not None:
                    gap = self.gain_rhs - float(self.gain_s @ x)
                    dist = max(dist, gap / float(np.sqrt(self.gain_ssq)))
                if dist > 1e-6 * (1.0 + float(np.linalg.norm(x))):
                    raise Infeasible(
                        "projection settled at distance "
                        f"{dist:.3g} from the constraint set; "
                        "constraint intersection is empty"
                    )
                self.last_residual = residual
                return x
        raise Infeasible(
            "projection residual did not shrink below tolerance; "
            "constraint intersection is empty or ill-posed"
        )


def project(
    v: np.ndarray,
    cons: ConstraintSet,
    probs: ComplianceProbabilities,
    tol: float = 1e-10,
    max_sweeps: int = 10_000,
) -> np.ndarray:
    """Euclidean projection of v onto the constraint polytope."""
    v = np.asarray(v, dtype=float)
    return _Projector(cons, probs, v.shape[0])(v, tol, max_sweeps)


def solve(
    prob: DesignProblem,
    cons: ConstraintSet | None = None,
    opts: SolverOptions | None = None,
) -> DesignSolution:
    """Minimize the criterion over the polytope by projected gradient descent.

    The descent step is preconditioned by the criterion's per-coordinate
    curvature (a diagonal-Newton direction, with projections taken in the
    matching weighted norm), because the raw curvature varies across rows
    by the squared alignment with the target direction and an unscaled
    step lets flat rows stall far from the optimum.  Armijo backtracking
    on the true gradient (sufficient decrease 1e-4, halving) starts from
    step 1.0 and restarts each iteration at twice the previously accepted
    step, capped at 1.0 since the direction already carries Newton scale
    (longer steps can flip near-converged coordinates back and forth).
    Initialization is the projection of the half vector.  Identical
    inputs give identical outputs bitwise.
    """
    cons = cons if cons is not None else ConstraintSet()
    opts = opts if opts is not None else SolverOptions()
    n = prob.n
    p_at, p_c = prob.probs.p_at, prob.probs.p_c

    projector = _Projector(cons, prob.probs, n)

    def proj(v, metric=None):
        return projector(v, opts.projection_tol, opts.max_sweeps, metric)

    def safeguarded_ew(e):
        return np.clip(p_at + p_c * e, _EW_GUARD, 1.0 - _EW_GUARD)

    def fval(e):
        return _objective_core(safeguarded_ew(e), prob)

    def fgrad(e):
        return _gradient_core(safeguarded_ew(e), prob)

    e = proj(np.full(n, 0.5))
    f = fval(e)
    step = opts.initial_step
    small_streak = 0
    iterations = 0
    for _ in range(opts.max_iter):
        iterations += 1
        g, direction, curvature = _direction_core(safeguarded_ew(e), prob)
        peak = float(np.max(curvature))
        if peak > 0.0:
            metric = np.maximum(curvature, 1e-10 * peak)
        else:
            metric = None  # degenerate flat objective; plain projection
        t = step
        cand = e
        f_cand = f
        while True:
            cand = proj(e + t * direction, metric)
            delta = cand - e
            decrease = float(g @ delta)
            f_cand = fval(cand)
            if f_cand <= f + opts.armijo_c * decrease:
                break
            t *= 0.5
            if t < 1e-20:
                cand, f_cand = e, f
                break
        step = min(2.0 * t, opts.initial_step)
        rel_drop = (f - f_cand) / max(abs(f), 1e-300)
        move = float(np.max(np.abs(cand - e)))
        settled = rel_drop < opts.rel_tol and move < opts.move_tol
        small_streak = small_streak + 1 if settled else 0
        e, f = cand, f_cand
        if small_streak >= opts.patience:
            break

    kkt = float(np.max(np.abs(e - proj(e - fgrad(e)))))
    hit_cap = iterations >= opts.max_iter and small_streak < opts.patience
    converged = not (hit_cap and kkt > opts.kkt_tol)
    if not converged:
        warnings.warn(
            f"design solver hit the iteration cap with KKT residual {kkt:.3e}",
            RuntimeWarning,
            stacklevel=2,
        )
    return DesignSolution(
        e_z_star=NudgePropensity(e_z=e),
        objective=fval(e),
        iterations=iterations,
        kkt_residual=kkt,
        projection_residual=projector.last_residual,
        converged=converged,
    )


def solution_to_json(sol: DesignSolution) -> str:
    payload = {
        "e_z_star": list(sol.e_z_star.e_z),
        "objective": sol.objective,
        "iterations": sol.iterations,
        "kkt_residual": sol.kkt_residual,
        "projection_residual": sol.projection_residual,
        "converged": sol.converged,
    }
    return json.dumps(payload, sort_keys=True, indent=2)


def closed_form_unconstrained(probs: ComplianceProbabilities) -> NudgePropensity:
    """Box-only optimum: push each induced propensity toward 1/2.

    Per row: (1 - 2 p_at) / (2 p_c) when that lands in [0,1], else the
    nearer box edge (0 when p_at > 1/2, 1 when p_at + p_c < 1/2).
    """
    p_at, p_c = probs.p_at, probs.p_c
    with np.errstate(divide="ignore", invalid="ignore"):
        interior = (1.0 - 2.0 * p_at) / (2.0 * p_c)
    e = np.where(p_at > 0.5, 0.0, np.where(p_at + p_c < 0.5, 1.0, interior))
    return NudgePropensity(e_z=np.clip(e, 0.0, 1.0))


def closed_form_budget(probs: ComplianceProbabilities, mu: float) -> NudgePropensity:
    """Budget-equality optimum for constant p_c: the constant vector
    (mu - mean(p_at)) / p_c."""
    p_c = probs.p_c
    if float(np.max(p_c) - np.min(p_c)) > 1e-9:
        raise PreconditionViolated("closed form requires constant p_c across rows")
    value = (mu - float(np.mean(probs.p_at))) / float(p_c[0])
    if not (-1e-12 <= value <= 1.0 + 1e-12):
        raise PreconditionViolated(
            f"(mu - mean(p_at)) / p_c = {value:.6g} lies outside [0,1]"
        )
    return NudgePropensity(e_z=np.full(probs.n, min(max(value, 0.0), 1.0)))


def rdd_design(
    score: np.ndarray, mu: float, probs: ComplianceProbabilities
) -> NudgePropensity:
    """Deterministic top-score encouragement under the budget.

    Encourage the highest-scoring rows, taking the largest prefix whose
    mean induced treatment propensity stays at or below mu; ties broken
    by row index ascending.
    """
    score = np.asarray(score, dtype=float)
    if not np.all(np.isfinite(score)):
        raise DomainViolation("score must be finite")
    if score.shape[0] != probs.n:
        raise LengthMismatch("score length does not match probabilities")
    n = probs.n
    order = np.argsort(-score, kind="stable")
    base = float(np.sum(probs.p_at)) / n
    cum = np.cumsum(probs.p_c[order]) / n
    k = int(np.searchsorted(base + cum, mu + 1e-12, side="right"))
    e = np.zeros(n)
    e[order[:k]] = 1.0
    return NudgePropensity(e_z=e)


def regularize_variances(
    sigma2_w0: np.ndarray, sigma2_w1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull variance pairs with ratio outside [1/2, 2] back to the boundary.

    The smaller variance becomes tau^2 = (3/2) / (1/s0 + 1/s1) and the
    larger 2 tau^2, preserving the row's total precision 1/s0 + 1/s1.
    """
    s0 = np.asarray(sigma2_w0, dtype=float)
    s1 = np.asarray(sigma2_w1, dtype=float)
    if s0.shape != s1.shape or s0.ndim != 1:
        raise LengthMismatch("variance vectors must be 1-d and equal length")
    if np.any(s0 <= 0.0) or np.any(s1 <= 0.0) or not (
        np.all(np.isfinite(s0)) and np.all(np.isfinite(s1))
    ):
        raise NonpositiveVariance("variances must be strictly positive and finite")
    ratio = s1 / s0
    bad = (ratio < 0.5) | (ratio > 2.0)
    if not np.any(bad):
        return s0.copy(), s1.copy()
    tau2 = 1.5 / (1.0 / s0 + 1.0 / s1)
    out0, out1 = s0.copy(), s1.copy()
    small0 = bad & (s0 <= s1)
    out0[small0] = tau2[small0]
    out1[small0] = 2.0 * tau2[small0]
    small1 = bad & (s1 < s0)
    out1[small1] = tau2[small1]
    out0[small1] = 2.0 * tau2[small1]
    return out0, out1


def objective_wls(
    e_z,
    prob: DesignProblem,
    sigma2_w0: np.ndarray,
    sigma2_w1: np.ndarray,
) -> float:
    """Heteroscedastic criterion with Bernoulli-mixture weights

        g_i = e_w (1 - e_w)^2 / s1 + (1 - e_w) e_w^2 / s0.

    Convexity holds only when every variance ratio s1/s0 lies in [1/2, 2]
    (callers regularize first); rows outside that band are rejected.
    """
    e = _as_ez(e_z)
    if e.shape[0] != prob.n:
        raise LengthMismatch(f"e_z length {e.shape[0]}, expected {prob.n}")
    s0 = np.asarray(sigma2_w0, dtype=float)
    s1 = np.asarray(sigma2_w1, dtype=float)
    if s0.shape != (prob.n,) or s1.shape != (prob.n,):
        raise LengthMismatch("variance vectors must match the problem size")
    if np.any(s0 <= 0.0) or np.any(s1 <= 0.0):
        raise NonpositiveVariance("variances must be strictly positive")
    ratio = s1 / s0
    if np.any(ratio < 0.5 - 1e-12) or np.any(ratio > 2.0 + 1e-12):
        raise RatioOutOfRange(
            "variance ratio outside [1/2, 2]; apply regularize_variances first"
        )
    e_w = prob.probs.p_at + prob.probs.p_c * e
    g = e_w * (1.0 - e_w) ** 2 / s1 + (1.0 - e_w) * e_w**2 / s0
    # equal variances collapse to the homoscedastic weight exactly, not
    # just up to rounding of the two-term sum
    same = s0 == s1
    if np.any(same):
        g = np.where(same, e_w * (1.0 - e_w) / s0, g)
    chol = _information_factor(prob.X, g)
    s = scipy.linalg.cho_solve(chol, prob.x_bar_c, check_finite=False)
    return prob._n_factor * float(prob.x_bar_c @ s)


def wls_weight_curvature(e_w, sigma2_w0, sigma2_w1):
    """Curvature expression of the heteroscedastic weight,
    (6 e_w - 4) / s0 + (2 - 6 e_w) / s1; nonpositive on [0,1] exactly when
    the variance ratio lies in [1/2, 2]."""
    e_w = np.asarray(e_w, dtype=float)
    s0 = np.asarray(sigma2_w0, dtype=float)
    s1 = np.asarray(sigma2_w1, dtype=float)
    return (6.0 * e_w - 4.0) / s0 + (2.0 - 6.0 * e_w) / s1
