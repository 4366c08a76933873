"""Exception taxonomy shared across the package."""


class NudgeDesignError(Exception):
    """Base class for all package errors."""


# dataset ingestion / validation


class MalformedCsv(NudgeDesignError):
    """A cell could not be parsed into the type its role requires."""


class SchemaViolation(NudgeDesignError):
    """A column named in the schema is missing from the file."""


class DomainViolation(NudgeDesignError):
    """A value lies outside its admissible domain (e.g. Z or W not in {0,1})."""


class LengthMismatch(NudgeDesignError):
    """Vector arguments that must be row-aligned have different lengths."""


class DimensionMismatch(NudgeDesignError):
    """Matrix width does not match the fitted coefficient dimension."""


# fitting


class SingularHessian(NudgeDesignError):
    """Newton step undefined; usually separable data with too small a ridge penalty."""


class NoConvergence(NudgeDesignError):
    """Iteration limit reached without meeting the convergence criterion."""


class EmptyArm(NudgeDesignError):
    """A nudge arm (Z=0 or Z=1) contains no rows."""


class EmptyCell(NudgeDesignError):
    """A required (z, w) cell contains no rows under a learner that needs it."""


# design / optimization


class SingularInformation(NudgeDesignError):
    """The weighted information matrix is not positive definite."""


class Infeasible(NudgeDesignError):
    """The constraint intersection is empty (projection residual does not shrink)."""


class PreconditionViolated(NudgeDesignError):
    """A closed-form formula was called outside its hypotheses."""


class RatioOutOfRange(NudgeDesignError):
    """A variance ratio lies outside [1/2, 2], voiding the convexity guarantee."""


class NonpositiveVariance(NudgeDesignError):
    """A variance entry is zero or negative."""


class InvalidCurve(NudgeDesignError):
    """Compliance-curve parameters produce an invalid probability triple."""


# estimation


class FoldTooSmall(NudgeDesignError):
    """Cross-fitting folds would be too small for the requested K."""


class ResampleDegenerate(NudgeDesignError):
    """A bootstrap resample produced a degenerate (singular) design."""
