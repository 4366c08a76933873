"""Compliance-class probabilities from pilot data.

Two ridge-penalized logistic regressions identify the class mix: among
Z=0 rows only always-takers have W=1, so P(W=1 | Z=0, X) = p_at(X);
among Z=1 rows only never-takers have W=0, so P(W=1 | Z=1, X) =
p_at(X) + p_c(X).  Differencing the two fits gives the complier
probability, floored away from zero because it appears in denominators
downstream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    DomainViolation,
    EmptyArm,
    LengthMismatch,
    NoConvergence,
    SingularHessian,
)
from .model import ComplianceProbabilities, EncouragementDataset

__all__ = [
    "ComplianceModel",
    "ComplierMean",
    "fit_logistic",
    "fit_compliance",
    "predict_probs",
    "complier_mean",
]

DEFAULT_RIDGE_LAMBDA = 1e-4
DEFAULT_CLIP_EPSILON = 1e-3

_MAX_ITER = 100
_STEP_TOL = 1e-10
_MAX_HALVINGS = 30


@dataclass(frozen=True)
class ComplianceModel:
    """Fitted logistic coefficients for the two nudge arms plus clipping policy."""

    beta_z0: np.ndarray
    beta_z1: np.ndarray
    ridge_lambda: float
    clip_epsilon: float

    def __post_init__(self):
        b0 = np.ascontiguousarray(self.beta_z0, dtype=float)
        b1 = np.ascontiguousarray(self.beta_z1, dtype=float)
        if b0.ndim != 1 or b1.ndim != 1 or b0.shape != b1.shape:
            raise DimensionMismatch("coefficient vectors must be 1-d and equal length")
        if not (np.all(np.isfinite(b0)) and np.all(np.isfinite(b1))):
            raise DomainViolation("coefficients must be finite")
        if self.ridge_lambda < 0:
            raise DomainViolation("ridge_lambda must be nonnegative")
        if not (0.0 < self.clip_epsilon <= 0.1):
            raise DomainViolation("clip_epsilon must lie in (0, 0.1]")
        b0.setflags(write=False)
        b1.setflags(write=False)
        object.__setattr__(self, "beta_z0", b0)
        object.__setattr__(self, "beta_z1", b1)

    @property
    def d(self) -> int:
        return self.beta_z0.shape[0]

    def to_json(self) -> str:
        payload = {
            "beta_z0": list(self.beta_z0),
            "beta_z1": list(self.beta_z1),
            "ridge_lambda": self.ridge_lambda,
            "clip_epsilon": self.clip_epsilon,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ComplianceModel":
        payload = json.loads(text)
        return cls(
            beta_z0=np.asarray(payload["beta_z0"], dtype=float),
            beta_z1=np.asarray(payload["beta_z1"], dtype=float),
            ridge_lambda=float(payload["ridge_lambda"]),
            clip_epsilon=float(payload["clip_epsilon"]),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ComplianceModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class ComplierMean:
    """Complier-weighted covariate mean and the marginal compliance rate."""

    x_bar_c: np.ndarray
    p_c_marginal: float

    def __post_init__(self):
        x = np.ascontiguousarray(self.x_bar_c, dtype=float)
        x.setflags(write=False)
        object.__setattr__(self, "x_bar_c", x)
        if not (0.0 < self.p_c_marginal <= 1.0):
            raise DomainViolation("p_c_marginal must lie in (0, 1]")


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _penalized_nll(beta, A, y, lam) -> float:
    eta = A @ beta
    # softplus(eta) - y*eta, stable for large |eta|
    return float(np.sum(np.logaddexp(0.0, eta) - y * eta) + 0.5 * lam * beta @ beta)


def fit_logistic(features: np.ndarray, labels: np.ndarray, ridge_lambda: float) -> np.ndarray:
    """Ridge-penalized logistic MLE via damped Newton (IRLS).

    Stops when the largest coefficient step falls below 1e-10 or after 100
    iterations.  When a full Newton step does not improve the penalized
    likelihood, the step is halved up to 30 times; quasi-separated data
    with ridge_lambda too small surface as SingularHessian.
    """
    A = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    if A.ndim != 2:
        raise DomainViolation("features must be a matrix")
    m, d = A.shape
    if m < 1:
        raise DomainViolation("need at least one row")
    if y.shape != (m,):
        raise LengthMismatch(f"labels have shape {y.shape}, expected ({m},)")
    if not np.all(np.isfinite(A)):
        raise DomainViolation("features contain non-finite values")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DomainViolation("labels must be in {0,1}")
    if ridge_lambda < 0:
        raise DomainViolation("ridge_lambda must be nonnegative")

    beta = np.zeros(d)
    nll = _penalized_nll(beta, A, y, ridge_lambda)
    for _ in range(_MAX_ITER):
        p = _sigmoid(A @ beta)
        grad = A.T @ (p - y) + ridge_lambda * beta
        w = p * (1.0 - p)
        H = (A * w[:, None]).T @ A
        if ridge_lambda > 0:
            H[np.diag_indices_from(H)] += ridge_lambda
        try:
            chol = scipy.linalg.cho_factor(H, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError:
            raise SingularHessian(
                "Newton step undefined; increase ridge_lambda"
            ) from None
        step = scipy.linalg.cho_solve(chol, grad, check_finite=False)
        if not np.all(np.isfinite(step)):
            raise SingularHessian("non-finite Newton step; increase ridge_lambda")

        # damped update: halve until the penalized likelihood improves
        scale = 1.0
        accepted = False
        for _ in range(_MAX_HALVINGS + 1):
            cand = beta - scale * step
            cand_nll = _penalized_nll(cand, A, y, ridge_lambda)
            if cand_nll <= nll:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            if np.max(np.abs(step)) < _STEP_TOL:
                break
            raise NoConvergence("logistic fit stalled without improving likelihood")
        moved = scale * np.max(np.abs(step))
        beta, nll = cand, cand_nll
        if moved < _STEP_TOL:
            break
    if not np.all(np.isfinite(beta)):
        raise NoConvergence("logistic coefficients diverged")
    return beta


def fit_compliance(
    pilot: EncouragementDataset,
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
    clip_epsilon: float = DEFAULT_CLIP_EPSILON,
) -> ComplianceModel:
    """Fit the two arm-wise logistic regressions on a pilot study."""
    z0 = pilot.Z == 0.0
    z1 = pilot.Z == 1.0
    if not np.any(z0):
        raise EmptyArm("pilot has no Z=0 rows")
    if not np.any(z1):
        raise EmptyArm("pilot has no Z=1 rows")
    beta_z0 = fit_logistic(pilot.X[z0], pilot.W[z0], ridge_lambda)
    beta_z1 = fit_logistic(pilot.X[z1], pilot.W[z1], ridge_lambda)
    return ComplianceModel(
        beta_z0=beta_z0,
        beta_z1=beta_z1,
        ridge_lambda=ridge_lambda,
        clip_epsilon=clip_epsilon,
    )


def predict_probs(model: ComplianceModel, X: np.ndarray) -> ComplianceProbabilities:
    """Map covariates to clipped (p_at, p_nt, p_c) triples.

    Raw fits may cross (estimated complier mass negative); no defiers
    makes that a pure estimation artifact, so p_c is floored at the clip
    epsilon and p_at shrunk to keep the triple a probability vector.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise DimensionMismatch(
            f"X has shape {X.shape}, model expects d={model.d}"
        )
    p_at_raw = _sigmoid(X @ model.beta_z0)
    p_atc_raw = _sigmoid(X @ model.beta_z1)
    eps = model.clip_epsilon
    p_c = np.clip(p_atc_raw - p_at_raw, eps, 1.0)
    p_at = np.clip(p_at_raw, 0.0, 1.0 - p_c)
    p_nt = 1.0 - p_at - p_c
    return ComplianceProbabilities(p_at=p_at, p_nt=p_nt, p_c=p_c)


def complier_mean(X: np.ndarray, probs: ComplianceProbabilities) -> ComplierMean:
    """Complier covariate mean: rows weighted by p_c / mean(p_c)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != probs.n:
        raise LengthMismatch(
            f"X has {X.shape[0] if X.ndim == 2 else '?'} rows, probabilities have {probs.n}"
        )
    marginal = float(np.mean(probs.p_c))
    x_bar_c = (X.T @ probs.p_c) / (probs.n * marginal)
    return ComplierMean(x_bar_c=x_bar_c, p_c_marginal=marginal)
