"""Synthetic study generator, analytic target, and the benchmark loop."""

import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from nudgedesign import (
    CurveParams,
    DesignStrategy,
    DgpConfig,
    DomainViolation,
    EstimatorSpec,
    InvalidCurve,
    compliance_curves,
    emit_report,
    generate_covariates,
    generate_dataset,
    run_monte_carlo,
    true_late,
)
from nudgedesign.simulation import baseline_values

SMALL = dict(
    d=4, gamma_true=(1.0, -2.0, 0.5, 3.0), baseline_fn="affine",
    noise_var=1.0, class_shift=0.0,
)


class TestDgpConfig:
    def test_defaults_validate(self):
        config = DgpConfig()
        assert config.d == 7 and config.score_col == 6
        assert config.baseline_fn == "smooth-nonlinear"

    def test_gamma_length_must_match_d(self):
        with pytest.raises(DomainViolation):
            DgpConfig(n=10, d=3, gamma_true=(1.0, 2.0))

    def test_rejects_bad_fields(self):
        with pytest.raises(DomainViolation):
            DgpConfig(n=0)
        with pytest.raises(DomainViolation):
            DgpConfig(n=10, d=1, gamma_true=(1.0,))
        with pytest.raises(DomainViolation):
            DgpConfig(n=10, **{**SMALL, "baseline_fn": "forest"})
        with pytest.raises(DomainViolation):
            DgpConfig(n=10, **{**SMALL, "noise_var": -1.0})
        with pytest.raises(DomainViolation):
            DgpConfig(n=10, **{**SMALL, "pilot_fraction": 0.0})

    def test_smooth_baseline_needs_room(self):
        with pytest.raises(DomainViolation):
            DgpConfig(n=10, d=3, gamma_true=(1.0, 1.0, 1.0))

    def test_score_col_cannot_be_intercept(self):
        with pytest.raises(DomainViolation):
            DgpConfig(n=10, score_col=0, **SMALL)

    def test_curve_params_validated_on_whole_range(self):
        with pytest.raises(InvalidCurve):
            DgpConfig(n=10, curves=CurveParams(floor=0.5), **SMALL)


class TestCovariates:
    def test_score_column_is_rank_uniform(self):
        config = DgpConfig(n=4, **SMALL)
        X = generate_covariates(config, np.random.default_rng(0))
        np.testing.assert_allclose(np.sort(X[:, config.score_col]), [0.2, 0.4, 0.6, 0.8])

    def test_intercept_column(self):
        X = generate_covariates(DgpConfig(n=50, **SMALL), np.random.default_rng(1))
        assert np.all(X[:, 0] == 1.0)

    def test_normal_columns_centered(self):
        n = 10_000
        config = DgpConfig(n=n, **SMALL)
        X = generate_covariates(config, np.random.default_rng(2))
        for j in range(1, config.d):
            if j == config.score_col:
                continue
            assert abs(float(np.mean(X[:, j]))) <= 3.0 / math.sqrt(n)

    def test_deterministic_given_rng(self):
        config = DgpConfig(n=30, **SMALL)
        a = generate_covariates(config, np.random.default_rng(3))
        b = generate_covariates(config, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestComplianceCurves:
    def test_endpoint_values(self):
        probs = compliance_curves(np.array([0.0]))
        assert probs.p_nt[0] == pytest.approx(0.85, abs=1e-12)
        assert probs.p_at[0] == pytest.approx(0.8 * math.exp(-5.0) + 0.05, abs=1e-12)
        assert probs.p_c[0] == pytest.approx(1.0 - 0.85 - 0.8 * math.exp(-5.0) - 0.05, abs=1e-12)

    def test_mirror_symmetry(self):
        r = np.linspace(0.0, 1.0, 21)
        a = compliance_curves(r)
        b = compliance_curves(1.0 - r)
        np.testing.assert_allclose(a.p_at, b.p_nt, atol=1e-14)
        np.testing.assert_allclose(a.p_c, b.p_c, atol=1e-14)

    def test_complier_mass_peaks_at_midpoint(self):
        r = np.linspace(0.0, 1.0, 101)
        probs = compliance_curves(r)
        mid = probs.p_c[50]
        assert probs.p_at[50] == pytest.approx(probs.p_nt[50], abs=1e-14)
        assert mid == np.max(probs.p_c)

    def test_rejects_scores_outside_unit_interval(self):
        with pytest.raises(DomainViolation):
            compliance_curves(np.array([-0.1, 0.5]))

    def test_invalid_params(self):
        with pytest.raises(InvalidCurve):
            compliance_curves(np.array([0.5]), CurveParams(floor=0.5))


class TestGenerateDataset:
    def test_never_nudged_means_only_always_takers_treated(self):
        n = 20_000
        config = DgpConfig(n=n, **SMALL)
        data = generate_dataset(config, np.zeros(n), np.random.default_rng(4))
        assert np.all(data.Z == 0.0)
        probs = compliance_curves(data.score)
        bound = 4.0 * math.sqrt(float(np.sum(probs.p_at * (1.0 - probs.p_at)))) / n
        assert abs(float(np.mean(data.W)) - float(np.mean(probs.p_at))) <= bound

    def test_noiseless_identity(self):
        config = DgpConfig(
            n=500, d=4, gamma_true=(1.0, -2.0, 0.5, 3.0), baseline_fn="affine",
            noise_var=0.0, class_shift=0.0,
            curves=CurveParams(a=0.0, floor=0.0),  # everyone complies
        )
        data = generate_dataset(config, np.full(500, 0.5), np.random.default_rng(5))
        f = baseline_values(config, data.X)
        treat = data.W * (data.X @ np.asarray(config.gamma_true))
        assert np.array_equal(data.Y, f + treat)

    def test_class_shift_decomposition(self):
        # zero baseline, zero gamma, zero noise: Y only records the class.
        # never nudging makes W=1 identify always-takers exactly
        n = 50_000
        config = DgpConfig(
            n=n, d=3, gamma_true=(0.0, 0.0, 0.0), baseline_fn="zero",
            noise_var=0.0, class_shift=10.0,
        )
        data = generate_dataset(config, np.zeros(n), np.random.default_rng(6))
        assert np.all(data.Y[data.W == 1.0] == 10.0)
        rest = data.Y[data.W == 0.0]
        probs = compliance_curves(data.score)
        expected = -10.0 * float(np.sum(probs.p_nt)) / float(np.sum(1.0 - probs.p_at))
        assert abs(float(np.mean(rest)) - expected) <= 5.0 * 10.0 * 0.5 / math.sqrt(rest.size)

    def test_rejects_bad_propensity(self):
        config = DgpConfig(n=20, **SMALL)
        with pytest.raises(DomainViolation):
            generate_dataset(config, np.full(19, 0.5), np.random.default_rng(0))
        with pytest.raises(DomainViolation):
            generate_dataset(config, np.full(20, 1.5), np.random.default_rng(0))

    def test_deterministic_and_reuses_supplied_covariates(self):
        config = DgpConfig(n=40, **SMALL)
        a = generate_dataset(config, np.full(40, 0.5), np.random.default_rng(7))
        b = generate_dataset(config, np.full(40, 0.5), np.random.default_rng(7))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.Y, b.Y)
        X = generate_covariates(config, np.random.default_rng(8))
        c = generate_dataset(config, np.full(40, 0.5), np.random.default_rng(9), X=X)
        assert c.X is X or np.array_equal(c.X, X)
        assert c.score_col == config.score_col


class TestTrueLate:
    def test_constant_complier_share_drops_the_weights(self):
        # constant p_c means the complier mean is the population mean, so
        # the curve level cannot matter
        base = dict(n=10, d=3, gamma_true=(2.0, 1.5, 4.0), baseline_fn="zero")
        a = DgpConfig(curves=CurveParams(a=0.0, floor=0.25), **base)
        b = DgpConfig(curves=CurveParams(a=0.0, floor=0.4), **base)
        tau_a, se_a = true_late(a, n_oracle=200_000, seed=3)
        tau_b, _ = true_late(b, n_oracle=200_000, seed=3)
        assert tau_a == pytest.approx(tau_b, rel=1e-12)
        # analytic: gamma_0 + 0.5 * gamma_score, normals average out
        assert abs(tau_a - 4.0) <= 5.0 * se_a

    def test_matches_quadrature_oracle_on_defaults(self):
        config = DgpConfig()
        tau, se = true_late(config, n_oracle=400_000, seed=0)
        r = np.linspace(0.0, 1.0, 1_000_001)
        p_c = compliance_curves(r).p_c
        g0, gs = config.gamma_true[0], config.gamma_true[config.score_col]
        oracle = float(np.trapezoid(p_c * (g0 + gs * r), r) / np.trapezoid(p_c, r))
        assert abs(tau - oracle) <= 4.0 * se
        assert se < 0.3

    def test_deterministic(self):
        config = DgpConfig()
        assert true_late(config, n_oracle=50_000, seed=1) == true_late(
            config, n_oracle=50_000, seed=1
        )

    def test_tiny_oracle_rejected(self):
        with pytest.raises(DomainViolation):
            true_late(DgpConfig(), n_oracle=1)


class TestDesignStrategy:
    def test_validation(self):
        with pytest.raises(DomainViolation):
            DesignStrategy(name="x", kind="bandit")
        with pytest.raises(DomainViolation):
            DesignStrategy(name="x", kind="rct", value=1.5)
        with pytest.raises(DomainViolation):
            DesignStrategy(name="x", kind="rdd")


def small_benchmark(seed=1, threads=1, R=3):
    config = DgpConfig(n=200, **SMALL)
    designs = [
        DesignStrategy(name="rct", kind="rct", value=0.5),
        DesignStrategy(name="pointwise", kind="closed-form"),
        DesignStrategy(name="optimal", kind="optimal", budget=0.45, monotone=True),
    ]
    return run_monte_carlo(
        config, designs, n_grid=[200, 400], R=R, seed=seed,
        threads=threads, n_oracle=50_000,
    )


class TestRunMonteCarlo:
    def test_bookkeeping_and_moment_identity(self):
        report = small_benchmark()
        assert report.replications == 3
        assert report.design_names == ("rct", "pointwise", "optimal")
        assert report.n_grid == (200, 400)
        assert len(report.cells) == 6
        for cell in report.cells:
            assert cell.count + cell.failures == 3
            assert cell.count > 0
            scale = max(1.0, abs(cell.mse))
            assert abs(cell.mse - (cell.variance + cell.bias**2)) <= 1e-10 * scale
            assert cell.ratio_mean >= 1.0 - 1e-9
        pointwise = [c for c in report.cells if c.design == "pointwise"]
        assert all(c.ratio_mean == pytest.approx(1.0, abs=1e-12) for c in pointwise)

    def test_deterministic_given_seed(self):
        assert small_benchmark(seed=2) == small_benchmark(seed=2)

    def test_thread_count_does_not_change_results(self):
        assert small_benchmark(seed=3, R=2) == small_benchmark(
            seed=3, threads=2, R=2
        )

    def test_contract_checks(self):
        config = DgpConfig(n=100, **SMALL)
        rct = DesignStrategy(name="a", kind="rct")
        with pytest.raises(DomainViolation):
            run_monte_carlo(config, [rct], n_grid=[100], R=1)
        with pytest.raises(DomainViolation):
            run_monte_carlo(config, [rct, rct], n_grid=[100], R=2)
        with pytest.raises(DomainViolation):
            run_monte_carlo(config, [], n_grid=[100], R=2)


class TestEmitReport:
    def test_files_and_shapes(self, tmp_path):
        report = small_benchmark()
        paths = emit_report(report, str(tmp_path))
        names = [p.rsplit("/", 1)[-1] for p in paths]
        assert names == ["results.csv", "objectives.csv", "variance.svg", "mse.svg"]

        results = (tmp_path / "results.csv").read_text().strip().splitlines()
        assert results[0] == "design,n,metric,value"
        assert len(results) == 1 + 6 * len(report.cells)

        objectives = (tmp_path / "objectives.csv").read_text().strip().splitlines()
        assert objectives[0] == "design,n,objective,ratio"
        assert len(objectives) == 1 + len(report.cells)

        for fname in ("variance.svg", "mse.svg"):
            svg = (tmp_path / fname).read_text()
            root = ET.fromstring(svg)
            assert root.tag.endswith("svg")
            polylines = [el for el in root.iter() if el.tag.endswith("polyline")]
            assert len(polylines) == len(report.design_names)

    def test_empty_report_rejected(self, tmp_path):
        empty = small_benchmark().__class__(
            cells=(), true_tau=0.0, true_tau_se=0.0,
            design_names=(), n_grid=(), replications=2,
        )
        with pytest.raises(DomainViolation):
            emit_report(empty, str(tmp_path))
