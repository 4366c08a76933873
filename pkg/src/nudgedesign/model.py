"""Core data types, CSV ingestion, and the elementary propensity algebra.

An encouragement experiment randomizes a nudge Z toward a treatment W rather
than W itself.  Rows carry covariates X (one column may be an intercept of
ones, one column is a designated risk/priority score), the nudge Z, the
realized treatment W, and optionally the outcome Y.  Everything downstream
works on these containers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainViolation,
    LengthMismatch,
    MalformedCsv,
    SchemaViolation,
)

__all__ = [
    "EncouragementDataset",
    "ComplianceProbabilities",
    "NudgePropensity",
    "OverlapReport",
    "load_dataset",
    "load_covariates",
    "write_dataset",
    "induced_treatment_propensity",
    "validate_overlap",
]


def _frozen_array(a, dtype=float, ndim=1):
    arr = np.asarray(a, dtype=dtype)
    if arr.ndim != ndim:
        raise DomainViolation(f"expected {ndim}-d array, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EncouragementDataset:
    """Immutable (X, Z, W, Y) container with a designated score column.

    Y may be absent: the design stage needs only X, Z, W.
    """

    X: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    Y: np.ndarray | None = None
    score_col: int = 0
    column_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            raise DomainViolation(f"X must be a matrix, got shape {X.shape}")
        n, d = X.shape
        if n < 1 or d < 1:
            raise DomainViolation(f"need n >= 1 and d >= 1, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise DomainViolation("X contains non-finite values")
        X = np.ascontiguousarray(X)
        X.setflags(write=False)
        object.__setattr__(self, "X", X)

        for name in ("Z", "W"):
            v = _frozen_array(getattr(self, name))
            if v.shape[0] != n:
                raise LengthMismatch(f"{name} has length {v.shape[0]}, expected {n}")
            if not np.all((v == 0.0) | (v == 1.0)):
                raise DomainViolation(f"{name} entries must be in {{0,1}}")
            object.__setattr__(self, name, v)

        if self.Y is not None:
            y = _frozen_array(self.Y)
            if y.shape[0] != n:
                raise LengthMismatch(f"Y has length {y.shape[0]}, expected {n}")
            if not np.all(np.isfinite(y)):
                raise DomainViolation("Y contains non-finite values")
            object.__setattr__(self, "Y", y)

        if not (0 <= self.score_col < d):
            raise DomainViolation(f"score_col {self.score_col} out of range for d={d}")
        if self.column_names and len(self.column_names) != d:
            raise SchemaViolation(
                f"column_names has {len(self.column_names)} entries, expected {d}"
            )
        if not self.column_names:
            object.__setattr__(self, "column_names", [f"x{j}" for j in range(d)])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def score(self) -> np.ndarray:
        return self.X[:, self.score_col]

    def subset(self, idx) -> "EncouragementDataset":
        """Row subset (or resample) keeping the schema."""
        return EncouragementDataset(
            X=self.X[idx],
            Z=self.Z[idx],
            W=self.W[idx],
            Y=None if self.Y is None else self.Y[idx],
            score_col=self.score_col,
            column_names=list(self.column_names),
        )

    def concat(self, other: "EncouragementDataset") -> "EncouragementDataset":
        """Row-stack two datasets sharing a schema (pilot + main merges)."""
        if other.d != self.d or other.score_col != self.score_col:
            raise SchemaViolation("datasets have incompatible schemas")
        if (self.Y is None) != (other.Y is None):
            raise SchemaViolation("cannot merge datasets with and without Y")
        return EncouragementDataset(
            X=np.vstack([self.X, other.X]),
            Z=np.concatenate([self.Z, other.Z]),
            W=np.concatenate([self.W, other.W]),
            Y=None if self.Y is None else np.concatenate([self.Y, other.Y]),
            score_col=self.score_col,
            column_names=list(self.column_names),
        )


@dataclass(frozen=True)
class ComplianceProbabilities:
    """Per-row (p_at, p_nt, p_c) triples; no defiers, so they sum to one.

    p_c is strictly positive everywhere (producers floor it at their clip
    epsilon) because it appears in denominators downstream.
    """

    p_at: np.ndarray
    p_nt: np.ndarray
    p_c: np.ndarray

    def __post_init__(self):
        p_at = _frozen_array(self.p_at)
        p_nt = _frozen_array(self.p_nt)
        p_c = _frozen_array(self.p_c)
        n = p_at.shape[0]
        if p_nt.shape[0] != n or p_c.shape[0] != n:
            raise LengthMismatch("p_at, p_nt, p_c must have equal length")
        for name, v in (("p_at", p_at), ("p_nt", p_nt), ("p_c", p_c)):
            if not np.all(np.isfinite(v)):
                raise DomainViolation(f"{name} contains non-finite values")
            if np.any(v < -1e-12) or np.any(v > 1.0 + 1e-12):
                raise DomainViolation(f"{name} entries must lie in [0,1]")
        if np.any(p_c <= 0.0):
            raise DomainViolation("p_c must be strictly positive (some compliers)")
        if np.max(np.abs(p_at + p_nt + p_c - 1.0)) > 1e-12:
            raise DomainViolation("p_at + p_nt + p_c must equal 1 within 1e-12")
        object.__setattr__(self, "p_at", p_at)
        object.__setattr__(self, "p_nt", p_nt)
        object.__setattr__(self, "p_c", p_c)

    @property
    def n(self) -> int:
        return self.p_at.shape[0]

    def subset(self, idx) -> "ComplianceProbabilities":
        return ComplianceProbabilities(self.p_at[idx], self.p_nt[idx], self.p_c[idx])


@dataclass(frozen=True)
class NudgePropensity:
    """Design variable: per-row probability of assigning the nudge."""

    e_z: np.ndarray

    def __post_init__(self):
        e_z = _frozen_array(self.e_z)
        if not np.all(np.isfinite(e_z)):
            raise DomainViolation("e_z contains non-finite values")
        if np.any(e_z < 0.0) or np.any(e_z > 1.0):
            raise DomainViolation("e_z entries must lie in [0,1]")
        object.__setattr__(self, "e_z", e_z)

    @property
    def n(self) -> int:
        return self.e_z.shape[0]


@dataclass(frozen=True)
class OverlapReport:
    """Indices where the induced treatment propensity leaves [eta, 1-eta]."""

    eta: float
    violations: np.ndarray

    @property
    def ok(self) -> bool:
        return self.violations.size == 0


def _parse_schema(schema: dict, header: list[str]):
    """Resolve a role mapping against a CSV header.

    schema keys: "x" (list of column names), "z", "w", optional "y",
    "score" (one of the x names), optional "intercept" (prepend a ones
    column).
    """
    for role in ("x", "z", "w", "score"):
        if role not in schema:
            raise SchemaViolation(f"schema is missing role '{role}'")
    x_names = list(schema["x"])
    if not x_names:
        raise SchemaViolation("schema role 'x' must name at least one column")
    named = x_names + [schema["z"], schema["w"]]
    if schema.get("y"):
        named.append(schema["y"])
    missing = [c for c in named if c not in header]
    if missing:
        raise SchemaViolation(f"columns missing from file: {missing}")
    if schema["score"] not in x_names:
        raise SchemaViolation(
            f"score column '{schema['score']}' must be one of the x columns"
        )
    return x_names


def load_dataset(path, schema: dict) -> EncouragementDataset:
    """Read a CSV with a header row and assemble a validated dataset.

    Roles are assigned through the explicit ``schema`` mapping so exports
    with arbitrary headers ingest without renaming.  ``intercept: True``
    prepends a ones column (named "intercept") to X; the loader never
    injects one on its own.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCsv(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise MalformedCsv(f"{path}: no data rows")

    x_names = _parse_schema(schema, header)
    col_idx = {name: header.index(name) for name in header}
    want_y = bool(schema.get("y"))

    def parse_cell(row_i, name, raw):
        raw = raw.strip()
        if raw == "":
            raise MalformedCsv(f"row {row_i}: missing value in column '{name}'")
        try:
            return float(raw)
        except ValueError:
            raise MalformedCsv(
                f"row {row_i}: cannot parse '{raw}' in column '{name}'"
            ) from None

    n = len(rows)
    width = len(header)
    X = np.empty((n, len(x_names)))
    Z = np.empty(n)
    W = np.empty(n)
    Y = np.empty(n) if want_y else None
    for i, row in enumerate(rows):
        if len(row) != width:
            raise MalformedCsv(f"row {i}: expected {width} cells, got {len(row)}")
        for j, name in enumerate(x_names):
            X[i, j] = parse_cell(i, name, row[col_idx[name]])
        Z[i] = parse_cell(i, schema["z"], row[col_idx[schema["z"]]])
        W[i] = parse_cell(i, schema["w"], row[col_idx[schema["w"]]])
        if want_y:
            Y[i] = parse_cell(i, schema["y"], row[col_idx[schema["y"]]])

    for name, v in (("z", Z), ("w", W)):
        bad = np.nonzero((v != 0.0) & (v != 1.0))[0]
        if bad.size:
            raise DomainViolation(
                f"column '{schema[name]}' has value {v[bad[0]]} outside {{0,1}} "
                f"at row {bad[0]}"
            )

    names = list(x_names)
    if schema.get("intercept"):
        X = np.hstack([np.ones((n, 1)), X])
        names = ["intercept"] + names
    score_col = names.index(schema["score"])
    return EncouragementDataset(
        X=X, Z=Z, W=W, Y=Y, score_col=score_col, column_names=names
    )


def load_covariates(path, schema: dict):
    """Read an X-only cohort CSV (roles "x", "score", optional
    "intercept"; any z/w/y roles in the schema are ignored here).

    Returns (X, score_col, column_names).
    """
    for role in ("x", "score"):
        if role not in schema:
            raise SchemaViolation(f"schema is missing role '{role}'")
    x_names = list(schema["x"])
    if not x_names:
        raise SchemaViolation("schema role 'x' must name at least one column")
    if schema["score"] not in x_names:
        raise SchemaViolation(
            f"score column '{schema['score']}' must be one of the x columns"
        )
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCsv(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise MalformedCsv(f"{path}: no data rows")
    missing = [c for c in x_names if c not in header]
    if missing:
        raise SchemaViolation(f"columns missing from file: {missing}")
    col_idx = {name: header.index(name) for name in x_names}

    n = len(rows)
    width = len(header)
    X = np.empty((n, len(x_names)))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise MalformedCsv(f"row {i}: expected {width} cells, got {len(row)}")
        for j, name in enumerate(x_names):
            raw = row[col_idx[name]].strip()
            if raw == "":
                raise MalformedCsv(f"row {i}: missing value in column '{name}'")
            try:
                X[i, j] = float(raw)
            except ValueError:
                raise MalformedCsv(
                    f"row {i}: cannot parse '{raw}' in column '{name}'"
                ) from None
    if not np.all(np.isfinite(X)):
        raise DomainViolation("covariates contain non-finite values")

    names = list(x_names)
    if schema.get("intercept"):
        X = np.hstack([np.ones((n, 1)), X])
        names = ["intercept"] + names
    return X, names.index(schema["score"]), names


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_dataset(
    data: EncouragementDataset,
    path,
    z_name: str = "z",
    w_name: str = "w",
    y_name: str = "y",
) -> None:
    """Write the dataset as CSV; floats carry 17 significant digits so a
    load/write cycle is bit-exact."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(data.column_names) + [z_name, w_name]
        if data.Y is not None:
            header.append(y_name)
        writer.writerow(header)
        for i in range(data.n):
            row = [_fmt(v) for v in data.X[i]]
            row.append(_fmt(data.Z[i]))
            row.append(_fmt(data.W[i]))
            if data.Y is not None:
                row.append(_fmt(data.Y[i]))
            writer.writerow(row)


def induced_treatment_propensity(
    probs: ComplianceProbabilities, e_z: NudgePropensity | np.ndarray
) -> np.ndarray:
    """Treatment probability induced by a nudge propensity:
    e_W = p_at + p_c * e_z, elementwise."""
    e = e_z.e_z if isinstance(e_z, NudgePropensity) else np.asarray(e_z, dtype=float)
    if e.shape[0] != probs.n:
        raise LengthMismatch(
            f"e_z has length {e.shape[0]}, probabilities have {probs.n}"
        )
    return probs.p_at + probs.p_c * e


def validate_overlap(e_w: np.ndarray, eta: float) -> OverlapReport:
    """Flag rows whose treatment propensity leaves [eta, 1-eta]."""
    if not (0.0 < eta < 0.5):
        raise DomainViolation(f"eta must lie in (0, 0.5), got {eta}")
    e_w = np.asarray(e_w, dtype=float)
    bad = np.nonzero((e_w < eta) | (e_w > 1.0 - eta))[0]
    return OverlapReport(eta=eta, violations=bad)
