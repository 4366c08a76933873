"""LATE estimation under the partially linear outcome model.

The pipeline regresses a centered response on compliance-weighted
covariates: with e_w = p_at + p_c * e_z and D = diag(W - e_w), the
centered response Y - m_star has conditional mean D X gamma, so

    gamma_hat = (X' D^2 X)^{-1} X' D (Y - m_star_hat),

and tau = x_bar_c' gamma_hat.  m_star corrects the outcome regression
for the confounding that noncompliance induces:

    m_star(X,Z,W) = m(X,Z,W) + (e_w - W)/p_c * (m(X,1) - m(X,0)),

with m(X,z) obtained by marginalizing the fitted m(X,z,w) over the
compliance mix.  Variants: cross-fitting (per-fold nuisances averaged
out-of-fold), weighted least squares for heteroscedastic noise, and a
row-resampling percentile bootstrap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.neighbors import NearestNeighbors

from .compliance import (
    DEFAULT_CLIP_EPSILON,
    DEFAULT_RIDGE_LAMBDA,
    ComplianceModel,
    ComplierMean,
    complier_mean,
    fit_compliance,
    predict_probs,
)
from .errors import (
    DomainViolation,
    EmptyArm,
    EmptyCell,
    FoldTooSmall,
    LengthMismatch,
    NoConvergence,
    NonpositiveVariance,
    NudgeDesignError,
    ResampleDegenerate,
    SingularHessian,
    SingularInformation,
)
from .model import (
    ComplianceProbabilities,
    EncouragementDataset,
    NudgePropensity,
    induced_treatment_propensity,
)

__all__ = [
    "RidgeLearner",
    "KnnLearner",
    "OutcomeModel",
    "LateEstimate",
    "BootstrapResult",
    "EstimatorSpec",
    "fit_outcome_model",
    "m_star_hat",
    "estimate_gamma_plugin",
    "estimate_gamma_crossfit",
    "estimate_gamma_wls",
    "estimate_variance_fn",
    "bootstrap_ci",
    "make_learner",
    "make_estimator",
]

_VARIANCE_FLOOR = 1e-8


class RidgeLearner:
    """Linear regression with an L2 penalty; solved in closed form."""

    def __init__(self, lam: float = DEFAULT_RIDGE_LAMBDA):
        if lam < 0:
            raise DomainViolation("ridge penalty must be nonnegative")
        self.lam = lam
        self.beta = None

    def clone(self) -> "RidgeLearner":
        return RidgeLearner(self.lam)

    def fit(self, A: np.ndarray, y: np.ndarray) -> "RidgeLearner":
        A = np.asarray(A, dtype=float)
        y = np.asarray(y, dtype=float)
        G = A.T @ A
        if self.lam > 0:
            G[np.diag_indices_from(G)] += self.lam
        rhs = A.T @ y
        try:
            chol = scipy.linalg.cho_factor(G, lower=True, check_finite=False)
            self.beta = scipy.linalg.cho_solve(chol, rhs, check_finite=False)
        except scipy.linalg.LinAlgError:
            # unpenalized and rank-deficient: fall back to least norm
            self.beta, *_ = np.linalg.lstsq(A, y, rcond=None)
        return self

    def predict(self, A: np.ndarray) -> np.ndarray:
        if self.beta is None:
            raise NudgeDesignError("learner not fitted")
        return np.asarray(A, dtype=float) @ self.beta


class KnnLearner:
    """k-nearest-neighbour regression, Euclidean on standardized X columns.

    Rows are stratified by the binary cell columns (z, w): neighbours are
    searched within the training rows of the query's cell, so forced-cell
    prediction never mixes cells.  k defaults to ceil(n^0.4).
    """

    def __init__(self, x_cols, cell_cols, k: int | None = None):
        self.x_cols = list(x_cols)
        self.cell_cols = list(cell_cols)
        self.k = k
        self._cells = None

    def clone(self) -> "KnnLearner":
        return KnnLearner(self.x_cols, self.cell_cols, self.k)

    def fit(self, A: np.ndarray, y: np.ndarray) -> "KnnLearner":
        A = np.asarray(A, dtype=float)
        y = np.asarray(y, dtype=float)
        n = A.shape[0]
        k = self.k if self.k is not None else int(math.ceil(n**0.4))
        Xb = A[:, self.x_cols]
        mu = Xb.mean(axis=0)
        sd = Xb.std(axis=0)
        sd[sd == 0.0] = 1.0
        self._mu, self._sd, self._k_eff = mu, sd, k
        Xs = (Xb - mu) / sd
        self._cells = {}
        keys = [tuple(int(round(v)) for v in A[i, self.cell_cols]) for i in range(n)]
        for key in set(keys):
            idx = np.array([i for i, kk in enumerate(keys) if kk == key])
            pts = Xs[idx]
            nn = NearestNeighbors(n_neighbors=min(k, idx.size)).fit(pts)
            self._cells[key] = (nn, y[idx])
        return self

    def predict(self, A: np.ndarray) -> np.ndarray:
        if self._cells is None:
            raise NudgeDesignError("learner not fitted")
        A = np.asarray(A, dtype=float)
        Xs = (A[:, self.x_cols] - self._mu) / self._sd
        out = np.empty(A.shape[0])
        keys = [
            tuple(int(round(v)) for v in A[i, self.cell_cols])
            for i in range(A.shape[0])
        ]
        for key in set(keys):
            rows = np.array([i for i, kk in enumerate(keys) if kk == key])
            if key not in self._cells:
                raise EmptyCell(f"no training rows in (z,w) cell {key}")
            nn, y_cell = self._cells[key]
            _, neigh = nn.kneighbors(Xs[rows])
            out[rows] = y_cell[neigh].mean(axis=1)
        return out


def make_learner(spec: str, d: int, **kwargs):
    """Build a learner for the outcome-model feature layout
    [X | z | w | z*X | w*X] with X of width d."""
    if spec == "ridge":
        return RidgeLearner(lam=kwargs.get("ridge_lambda", DEFAULT_RIDGE_LAMBDA))
    if spec == "knn":
        return KnnLearner(
            x_cols=range(d), cell_cols=[d, d + 1], k=kwargs.get("knn_k")
        )
    raise DomainViolation(f"unknown learner '{spec}'")


def _features(X: np.ndarray, z: np.ndarray, w: np.ndarray) -> np.ndarray:
    z = z[:, None]
    w = w[:, None]
    return np.hstack([X, z, w, z * X, w * X])


@dataclass
class OutcomeModel:
    """Fitted regression of Y on (X, Z, W, Z*X, W*X) with forced-cell and
    marginalized prediction."""

    learner: object
    d: int

    def predict_zw(self, X: np.ndarray, z, w) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
        w = np.broadcast_to(np.asarray(w, dtype=float), (n,))
        return self.learner.predict(_features(X, z, w))

    def predict_marginal(
        self, X: np.ndarray, z, probs: ComplianceProbabilities
    ) -> np.ndarray:
        """m(X, z): average the fitted m(X, z, w) over P(W = w | X, z)."""
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        zv = np.broadcast_to(np.asarray(z, dtype=float), (n,))
        p_w1 = probs.p_at + probs.p_c * zv
        m1 = self.predict_zw(X, zv, 1.0)
        m0 = self.predict_zw(X, zv, 0.0)
        return m1 * p_w1 + m0 * (1.0 - p_w1)


@dataclass(frozen=True)
class LateEstimate:
    """gamma_hat with the complier mean it is contracted against."""

    gamma_hat: np.ndarray
    x_bar_c: np.ndarray
    tau_late: float
    method: str
    ci: tuple[float, float, float] | None = None

    def __post_init__(self):
        g = np.ascontiguousarray(self.gamma_hat, dtype=float)
        x = np.ascontiguousarray(self.x_bar_c, dtype=float)
        g.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "gamma_hat", g)
        object.__setattr__(self, "x_bar_c", x)

    def with_ci(self, lo: float, hi: float, level: float) -> "LateEstimate":
        return LateEstimate(
            gamma_hat=self.gamma_hat,
            x_bar_c=self.x_bar_c,
            tau_late=self.tau_late,
            method=self.method,
            ci=(lo, hi, level),
        )

    def to_json(self) -> str:
        payload = {
            "gamma_hat": list(self.gamma_hat),
            "x_bar_c": list(self.x_bar_c),
            "tau_late": self.tau_late,
            "method": self.method,
        }
        if self.ci is not None:
            payload["ci"] = {
                "lo": self.ci[0],
                "hi": self.ci[1],
                "level": self.ci[2],
            }
        return json.dumps(payload, sort_keys=True, indent=2)


@dataclass(frozen=True)
class BootstrapResult:
    lo: float
    hi: float
    level: float
    redraws: int

    def __iter__(self):
        return iter((self.lo, self.hi))


def _make_estimate(gamma: np.ndarray, x_bar: ComplierMean, method: str) -> LateEstimate:
    tau = float(x_bar.x_bar_c @ gamma)
    return LateEstimate(
        gamma_hat=gamma, x_bar_c=x_bar.x_bar_c, tau_late=tau, method=method
    )


def fit_outcome_model(data: EncouragementDataset, learner="ridge", **kwargs) -> OutcomeModel:
    """Regress Y on (X, Z, W, Z*X, W*X) with the chosen learner."""
    if data.Y is None:
        raise DomainViolation("outcome model requires Y")
    if isinstance(learner, str):
        learner = make_learner(learner, data.d, **kwargs)
    elif hasattr(learner, "clone"):
        learner = learner.clone()
    fitted = learner.fit(_features(data.X, data.Z, data.W), data.Y)
    return OutcomeModel(learner=fitted, d=data.d)


def m_star_hat(
    model: OutcomeModel,
    probs: ComplianceProbabilities,
    data: EncouragementDataset,
    e_z,
) -> np.ndarray:
    """Centered conditional mean
    m(X,Z,W) + (e_w - W)/p_c * (m(X,1) - m(X,0))."""
    e_w = induced_treatment_propensity(probs, e_z)
    m_obs = model.predict_zw(data.X, data.Z, data.W)
    contrast = model.predict_marginal(data.X, 1.0, probs) - model.predict_marginal(
        data.X, 0.0, probs
    )
    return m_obs + (e_w - data.W) / probs.p_c * contrast


def _weighted_gamma(
    X: np.ndarray, dvec: np.ndarray, resp: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    """Solve (X' D V D X) gamma = X' D V resp with V diagonal (default identity)."""
    A = X * dvec[:, None]
    if weights is None:
        M = A.T @ A
        rhs = A.T @ resp
    else:
        M = (A * weights[:, None]).T @ A
        rhs = A.T @ (weights * resp)
    try:
        chol = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(chol, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        raise SingularInformation(
            "weighted design X' D^2 X not positive definite"
        ) from None


def estimate_gamma_plugin(
    data: EncouragementDataset,
    probs: ComplianceProbabilities,
    e_z,
    model: OutcomeModel,
) -> LateEstimate:
    """Plug-in residual-on-residual regression; tau contracts gamma_hat
    against the complier mean computed on the full data."""
    e_w = induced_treatment_propensity(probs, e_z)
    dvec = data.W - e_w
    resp = data.Y - m_star_hat(model, probs, data, e_z)
    gamma = _weighted_gamma(data.X, dvec, resp)
    return _make_estimate(gamma, complier_mean(data.X, probs), "plugin")


def estimate_gamma_crossfit(
    data: EncouragementDataset,
    e_z,
    K: int,
    learner: str = "ridge",
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
    clip_epsilon: float = DEFAULT_CLIP_EPSILON,
    seed: int = 0,
    reuse_model: ComplianceModel | None = None,
    nuisances=None,
    **learner_kwargs,
) -> LateEstimate:
    """K-fold cross-fitting: per-fold nuisance fits, out-of-fold averages,
    fold-wise regressions, averaged gamma.

    Compliance probabilities are refit inside each fold unless a pilot
    model is passed for reuse.  ``nuisances(sub, e_sub) -> (e_w, m_star)``
    bypasses the fitted nuisances entirely (oracle checks).
    """
    n = data.n
    if K < 2:
        raise DomainViolation("K must be at least 2")
    if n < 2 * K:
        raise FoldTooSmall(f"n={n} cannot support K={K} folds")
    e = e_z.e_z if isinstance(e_z, NudgePropensity) else np.asarray(e_z, dtype=float)
    if e.shape[0] != n:
        raise LengthMismatch("e_z length does not match data")

    rng = np.random.default_rng(seed)
    folds = np.array_split(rng.permutation(n), K)

    fold_probs_models: list[ComplianceModel] = []
    fold_outcomes: list[OutcomeModel] = []
    if nuisances is None:
        for idx in folds:
            sub = data.subset(idx)
            cm = reuse_model if reuse_model is not None else fit_compliance(
                sub, ridge_lambda=ridge_lambda, clip_epsilon=clip_epsilon
            )
            fold_probs_models.append(cm)
            fold_outcomes.append(
                fit_outcome_model(
                    sub, learner=learner, ridge_lambda=ridge_lambda, **learner_kwargs
                )
            )

    gammas = []
    for k, idx in enumerate(folds):
        sub = data.subset(idx)
        e_sub = e[idx]
        if nuisances is not None:
            ew_oof, mstar_oof = nuisances(sub, e_sub)
        else:
            ew_parts = []
            mstar_parts = []
            for j in range(K):
                if j == k:
                    continue
                probs_j = predict_probs(fold_probs_models[j], sub.X)
                ew_parts.append(induced_treatment_propensity(probs_j, e_sub))
                mstar_parts.append(m_star_hat(fold_outcomes[j], probs_j, sub, e_sub))
            ew_oof = np.mean(ew_parts, axis=0)
            mstar_oof = np.mean(mstar_parts, axis=0)
        gammas.append(_weighted_gamma(sub.X, sub.W - ew_oof, sub.Y - mstar_oof))
    gamma = np.mean(gammas, axis=0)

    full_cm = reuse_model if reuse_model is not None else fit_compliance(
        data, ridge_lambda=ridge_lambda, clip_epsilon=clip_epsilon
    )
    full_probs = predict_probs(full_cm, data.X)
    est = _make_estimate(gamma, complier_mean(data.X, full_probs), "crossfit")
    return est


def estimate_gamma_wls(
    data: EncouragementDataset,
    probs: ComplianceProbabilities,
    e_z,
    model: OutcomeModel,
    sigma2_hat: tuple[np.ndarray, np.ndarray],
) -> LateEstimate:
    """Weighted variant: rows weighted by the reciprocal estimated noise
    variance at the realized treatment arm; response stays centered."""
    s0, s1 = (np.asarray(s, dtype=float) for s in sigma2_hat)
    if s0.shape != (data.n,) or s1.shape != (data.n,):
        raise LengthMismatch("sigma2_hat vectors must match the data size")
    if np.any(s0 <= 0.0) or np.any(s1 <= 0.0):
        raise NonpositiveVariance("estimated variances must be strictly positive")
    realized = np.where(data.W == 1.0, s1, s0)
    e_w = induced_treatment_propensity(probs, e_z)
    dvec = data.W - e_w
    resp = data.Y - m_star_hat(model, probs, data, e_z)
    gamma = _weighted_gamma(data.X, dvec, resp, weights=1.0 / realized)
    return _make_estimate(gamma, complier_mean(data.X, probs), "wls")


def estimate_variance_fn(
    data: EncouragementDataset,
    model: OutcomeModel,
    probs: ComplianceProbabilities,
    learner: str | object = "ridge",
    **kwargs,
) -> tuple[np.ndarray, np.ndarray]:
    """Regress squared outcome residuals on (X, W); predictions at forced
    W=0 and W=1, floored at 1e-8."""
    if data.Y is None:
        raise DomainViolation("variance estimation requires Y")
    resid2 = (data.Y - model.predict_zw(data.X, data.Z, data.W)) ** 2
    if isinstance(learner, str):
        if learner == "ridge":
            lrn = RidgeLearner(lam=kwargs.get("ridge_lambda", DEFAULT_RIDGE_LAMBDA))
        elif learner == "knn":
            lrn = KnnLearner(
                x_cols=range(data.d), cell_cols=[data.d], k=kwargs.get("knn_k")
            )
        else:
            raise DomainViolation(f"unknown learner '{learner}'")
    elif hasattr(learner, "clone"):
        lrn = learner.clone()
    else:
        lrn = learner
    A = np.hstack([data.X, data.W[:, None]])
    fitted = lrn.fit(A, resid2)
    ones = np.ones((data.n, 1))
    zeros = np.zeros((data.n, 1))
    s1 = fitted.predict(np.hstack([data.X, ones]))
    s0 = fitted.predict(np.hstack([data.X, zeros]))
    return (
        np.maximum(s0, _VARIANCE_FLOOR),
        np.maximum(s1, _VARIANCE_FLOOR),
    )


@dataclass(frozen=True)
class EstimatorSpec:
    """Picklable recipe for a full estimate-from-data pipeline."""

    method: str = "plugin"
    learner: str = "ridge"
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA
    knn_k: int | None = None
    k_folds: int = 5
    clip_epsilon: float = DEFAULT_CLIP_EPSILON
    crossfit_seed: int = 0

    def __post_init__(self):
        if self.method not in ("plugin", "crossfit", "wls"):
            raise DomainViolation(f"unknown estimator method '{self.method}'")
        if self.learner not in ("ridge", "knn"):
            raise DomainViolation(f"unknown learner '{self.learner}'")


def make_estimator(spec: EstimatorSpec, compliance_model: ComplianceModel | None = None):
    """Turn a spec into ``estimator(data, e_z) -> LateEstimate``.

    Compliance is refit on the supplied data unless a pilot model is
    passed for reuse; crossfit handles its own per-fold refits.
    """

    def _learner_kwargs():
        return {"ridge_lambda": spec.ridge_lambda, "knn_k": spec.knn_k}

    def run(data: EncouragementDataset, e_z) -> LateEstimate:
        if spec.method == "crossfit":
            return estimate_gamma_crossfit(
                data,
                e_z,
                K=spec.k_folds,
                learner=spec.learner,
                ridge_lambda=spec.ridge_lambda,
                clip_epsilon=spec.clip_epsilon,
                seed=spec.crossfit_seed,
                reuse_model=compliance_model,
                knn_k=spec.knn_k,
            )
        cm = compliance_model if compliance_model is not None else fit_compliance(
            data, ridge_lambda=spec.ridge_lambda, clip_epsilon=spec.clip_epsilon
        )
        probs = predict_probs(cm, data.X)
        model = fit_outcome_model(data, learner=spec.learner, **_learner_kwargs())
        if spec.method == "plugin":
            return estimate_gamma_plugin(data, probs, e_z, model)
        from .design import regularize_variances

        s0, s1 = estimate_variance_fn(
            data, model, probs, learner=spec.learner, **_learner_kwargs()
        )
        s0, s1 = regularize_variances(s0, s1)
        return estimate_gamma_wls(data, probs, e_z, model, (s0, s1))

    return run


def bootstrap_ci(
    data: EncouragementDataset,
    e_z,
    estimator,
    B: int,
    level: float = 0.95,
    seed: int = 0,
    max_attempts: int = 20,
) -> BootstrapResult:
    """Nonparametric row-resampling percentile interval for tau.

    ``estimator(data, e_z) -> LateEstimate`` is refit on every resample.
    Degenerate resamples (singular designs, empty arms or cells) are
    redrawn with a fresh derived stream and counted.  Replicate b with
    attempt a uses the stream seeded by (seed, b, a), so results are
    deterministic and order-independent.
    """
    if B < 100:
        raise DomainViolation("bootstrap requires B >= 100")
    if not (0.0 < level < 1.0):
        raise DomainViolation("level must lie in (0,1)")
    e = e_z.e_z if isinstance(e_z, NudgePropensity) else np.asarray(e_z, dtype=float)
    if e.shape[0] != data.n:
        raise LengthMismatch("e_z length does not match data")

    degenerate = (
        SingularInformation,
        SingularHessian,
        EmptyArm,
        EmptyCell,
        NoConvergence,
    )
    taus = np.empty(B)
    redraws = 0
    for b in range(B):
        for attempt in range(max_attempts):
            rng = np.random.default_rng([seed, b, attempt])
            idx = rng.integers(0, data.n, data.n)
            try:
                est = estimator(data.subset(idx), e[idx])
            except degenerate:
                redraws += 1
                continue
            taus[b] = est.tau_late
            break
        else:
            raise ResampleDegenerate(
                f"replicate {b} failed {max_attempts} times in a row"
            )
    alpha = 1.0 - level
    lo, hi = np.quantile(taus, [alpha / 2.0, 1.0 - alpha / 2.0])
    return BootstrapResult(lo=float(lo), hi=float(hi), level=level, redraws=redraws)
