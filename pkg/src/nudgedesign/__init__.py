"""Optimal nudge-propensity design and LATE estimation for randomized
encouragement studies with noncompliance."""

from .compliance import (
    ComplianceModel,
    ComplierMean,
    complier_mean,
    fit_compliance,
    fit_logistic,
    predict_probs,
)
from .design import (
    ConstraintSet,
    DesignProblem,
    DesignSolution,
    GainConstraint,
    SolverOptions,
    closed_form_budget,
    closed_form_unconstrained,
    gradient,
    objective,
    objective_wls,
    project,
    rdd_design,
    regularize_variances,
    solve,
    wls_weight_curvature,
)
from .errors import (
    DimensionMismatch,
    DomainViolation,
    EmptyArm,
    EmptyCell,
    FoldTooSmall,
    Infeasible,
    InvalidCurve,
    LengthMismatch,
    MalformedCsv,
    NoConvergence,
    NonpositiveVariance,
    NudgeDesignError,
    PreconditionViolated,
    RatioOutOfRange,
    ResampleDegenerate,
    SchemaViolation,
    SingularHessian,
    SingularInformation,
)
from .estimation import (
    BootstrapResult,
    EstimatorSpec,
    KnnLearner,
    LateEstimate,
    OutcomeModel,
    RidgeLearner,
    bootstrap_ci,
    estimate_gamma_crossfit,
    estimate_gamma_plugin,
    estimate_gamma_wls,
    estimate_variance_fn,
    fit_outcome_model,
    m_star_hat,
    make_estimator,
)
from .model import (
    ComplianceProbabilities,
    EncouragementDataset,
    NudgePropensity,
    OverlapReport,
    induced_treatment_propensity,
    load_covariates,
    load_dataset,
    validate_overlap,
    write_dataset,
)
from .simulation import (
    CurveParams,
    DesignStrategy,
    DgpConfig,
    SimulationReport,
    compliance_curves,
    emit_report,
    generate_covariates,
    generate_dataset,
    run_monte_carlo,
    true_late,
)

__version__ = "0.1.0"
