"""Dataset containers, CSV round-trips, and the propensity algebra."""

import numpy as np
import pytest

from nudgedesign import (
    ComplianceProbabilities,
    DomainViolation,
    EncouragementDataset,
    LengthMismatch,
    MalformedCsv,
    NudgePropensity,
    SchemaViolation,
    induced_treatment_propensity,
    load_covariates,
    load_dataset,
    validate_overlap,
    write_dataset,
)

SCHEMA = {"x": ["x1"], "z": "z", "w": "w", "y": "y", "score": "x1"}


def small_dataset(with_y=True):
    return EncouragementDataset(
        X=np.array([[1.0, 0.3], [1.0, 0.6], [1.0, 0.9]]),
        Z=np.array([0.0, 1.0, 1.0]),
        W=np.array([0.0, 1.0, 0.0]),
        Y=np.array([1.5, -2.0, 0.25]) if with_y else None,
        score_col=1,
        column_names=["intercept", "risk"],
    )


class TestEncouragementDataset:
    def test_valid_construction(self):
        data = small_dataset()
        assert data.n == 3 and data.d == 2
        assert np.array_equal(data.score, [0.3, 0.6, 0.9])

    def test_missing_y_allowed(self):
        assert small_dataset(with_y=False).Y is None

    def test_rejects_nonbinary_z(self):
        with pytest.raises(DomainViolation):
            EncouragementDataset(
                X=np.ones((2, 1)), Z=np.array([0.0, 2.0]), W=np.zeros(2)
            )

    def test_rejects_nonfinite_x(self):
        with pytest.raises(DomainViolation):
            EncouragementDataset(
                X=np.array([[np.nan]]), Z=np.zeros(1), W=np.zeros(1)
            )

    def test_rejects_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            EncouragementDataset(X=np.ones((3, 1)), Z=np.zeros(2), W=np.zeros(3))

    def test_rejects_bad_score_col(self):
        with pytest.raises(DomainViolation):
            EncouragementDataset(
                X=np.ones((2, 1)), Z=np.zeros(2), W=np.zeros(2), score_col=5
            )

    def test_arrays_immutable(self):
        data = small_dataset()
        with pytest.raises(ValueError):
            data.X[0, 0] = 99.0

    def test_subset_keeps_schema(self):
        sub = small_dataset().subset(np.array([2, 0]))
        assert sub.n == 2
        assert sub.column_names == ["intercept", "risk"]
        assert sub.Y[0] == 0.25

    def test_concat_stacks_rows(self):
        a = small_dataset()
        merged = a.concat(a.subset(np.array([1])))
        assert merged.n == 4
        assert merged.Z[-1] == 1.0

    def test_concat_rejects_mixed_y(self):
        with pytest.raises(SchemaViolation):
            small_dataset().concat(small_dataset(with_y=False))


class TestComplianceProbabilities:
    def test_valid_triple(self):
        probs = ComplianceProbabilities(
            p_at=np.array([0.2]), p_nt=np.array([0.3]), p_c=np.array([0.5])
        )
        assert probs.n == 1

    def test_rejects_nonunit_sum(self):
        with pytest.raises(DomainViolation):
            ComplianceProbabilities(
                p_at=np.array([0.2]), p_nt=np.array([0.2]), p_c=np.array([0.5])
            )

    def test_rejects_zero_pc(self):
        with pytest.raises(DomainViolation):
            ComplianceProbabilities(
                p_at=np.array([0.5]), p_nt=np.array([0.5]), p_c=np.array([0.0])
            )

    def test_subset(self):
        probs = ComplianceProbabilities(
            p_at=np.array([0.2, 0.1]),
            p_nt=np.array([0.3, 0.4]),
            p_c=np.array([0.5, 0.5]),
        )
        assert probs.subset([1]).p_at[0] == 0.1


class TestNudgePropensity:
    def test_rejects_out_of_range(self):
        with pytest.raises(DomainViolation):
            NudgePropensity(e_z=np.array([1.2]))

    def test_accepts_endpoints(self):
        assert NudgePropensity(e_z=np.array([0.0, 1.0])).n == 2


class TestInducedPropensity:
    def test_ez_zero_gives_pat(self):
        probs = ComplianceProbabilities(
            p_at=np.array([0.2]), p_nt=np.array([0.3]), p_c=np.array([0.5])
        )
        assert induced_treatment_propensity(probs, np.array([0.0]))[0] == 0.2

    def test_ez_one_gives_pat_plus_pc(self):
        probs = ComplianceProbabilities(
            p_at=np.array([0.2]), p_nt=np.array([0.3]), p_c=np.array([0.5])
        )
        assert induced_treatment_propensity(probs, np.array([1.0]))[0] == pytest.approx(0.7)

    def test_interior_value(self):
        # p_at=0.1, p_c=0.6, e_z=0.5 -> 0.4
        probs = ComplianceProbabilities(
            p_at=np.array([0.1]), p_nt=np.array([0.3]), p_c=np.array([0.6])
        )
        assert induced_treatment_propensity(probs, np.array([0.5]))[0] == pytest.approx(0.4)

    def test_affine_monotone_and_bounded(self):
        rng = np.random.default_rng(0)
        n = 40
        p_at = rng.uniform(0.0, 0.4, n)
        p_nt = rng.uniform(0.0, 0.4, n)
        p_c = 1.0 - p_at - p_nt
        probs = ComplianceProbabilities(p_at=p_at, p_nt=p_nt, p_c=p_c)
        e1 = rng.random(n)
        e2 = np.minimum(e1 + rng.random(n) * (1.0 - e1), 1.0)
        w1 = induced_treatment_propensity(probs, e1)
        w2 = induced_treatment_propensity(probs, e2)
        assert np.all(w2 >= w1 - 1e-15)
        assert np.all(w1 >= p_at - 1e-15) and np.all(w1 <= p_at + p_c + 1e-15)

    def test_length_mismatch(self):
        probs = ComplianceProbabilities(
            p_at=np.array([0.2]), p_nt=np.array([0.3]), p_c=np.array([0.5])
        )
        with pytest.raises(LengthMismatch):
            induced_treatment_propensity(probs, np.array([0.5, 0.5]))


class TestValidateOverlap:
    def test_interior_ok(self):
        assert validate_overlap(np.array([0.3, 0.5]), 0.05).ok

    def test_flags_low_entry(self):
        report = validate_overlap(np.array([0.01, 0.5]), 0.05)
        assert list(report.violations) == [0]

    def test_flags_high_entry_only(self):
        report = validate_overlap(np.array([0.95, 0.96]), 0.05)
        assert list(report.violations) == [1]

    def test_eta_domain(self):
        with pytest.raises(DomainViolation):
            validate_overlap(np.array([0.5]), 0.7)


class TestCsvIo:
    def test_load_happy_path(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,z,w,y\n0.5,0,0,1.25\n0.75,1,1,-3\n0.25,1,0,0\n")
        data = load_dataset(p, SCHEMA)
        assert data.n == 3 and data.d == 1
        assert data.Y is not None
        assert data.X[1, 0] == 0.75

    def test_missing_role_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,z,y\n0.5,0,1\n")
        with pytest.raises(SchemaViolation):
            load_dataset(p, SCHEMA)

    def test_domain_violation_in_z(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,z,w,y\n0.5,2,0,1\n")
        with pytest.raises(DomainViolation):
            load_dataset(p, SCHEMA)

    def test_unparseable_cell(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,z,w,y\noops,0,0,1\n")
        with pytest.raises(MalformedCsv):
            load_dataset(p, SCHEMA)

    def test_missing_value(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,z,w,y\n,0,0,1\n")
        with pytest.raises(MalformedCsv):
            load_dataset(p, SCHEMA)

    def test_intercept_flag_prepends_ones(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("x1,z,w,y\n0.5,0,0,1\n0.7,1,1,2\n")
        data = load_dataset(p, dict(SCHEMA, intercept=True))
        assert data.d == 2
        assert np.all(data.X[:, 0] == 1.0)
        assert data.score_col == 1

    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        data = EncouragementDataset(
            X=rng.standard_normal((20, 3)),
            Z=(rng.random(20) < 0.5).astype(float),
            W=(rng.random(20) < 0.5).astype(float),
            Y=rng.standard_normal(20) * 17.3,
            score_col=2,
            column_names=["a", "b", "c"],
        )
        p1 = tmp_path / "one.csv"
        p2 = tmp_path / "two.csv"
        write_dataset(data, p1)
        loaded = load_dataset(
            p1, {"x": ["a", "b", "c"], "z": "z", "w": "w", "y": "y", "score": "c"}
        )
        write_dataset(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(loaded.X, data.X)
        assert np.array_equal(loaded.Y, data.Y)

    def test_load_covariates(self, tmp_path):
        p = tmp_path / "cohort.csv"
        p.write_text("r,extra\n0.5,9\n0.7,8\n")
        X, score_col, names = load_covariates(
            p, {"x": ["r"], "score": "r", "intercept": True}
        )
        assert X.shape == (2, 2)
        assert score_col == 1
        assert names == ["intercept", "r"]

    def test_load_covariates_missing_column(self, tmp_path):
        p = tmp_path / "cohort.csv"
        p.write_text("a\n1\n")
        with pytest.raises(SchemaViolation):
            load_covariates(p, {"x": ["r"], "score": "r"})
