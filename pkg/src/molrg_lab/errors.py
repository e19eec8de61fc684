"""Exception types shared across the package.

Every validation failure raises a named subclass of MolrgLabError so callers
can catch one family or match a specific condition.
"""


class MolrgLabError(ValueError):
    """Base class for all validation errors raised by this package."""


class NonPositiveSigma(MolrgLabError):
    """Noise level sigma must be >= SIGMA_MIN (zero noise is forbidden)."""


class NonPositiveDelta(MolrgLabError):
    """Data-noise scale delta must be strictly positive."""


class NotSorted(MolrgLabError):
    """Schedule sigmas must be strictly increasing."""


class LengthMismatch(MolrgLabError):
    """Paired sequences (e.g. sigmas and weights) must have equal length."""


class InvalidBetaRange(MolrgLabError):
    """DDPM beta parameters must satisfy 0 < beta_min < beta_max < 1."""


class DimensionOverflow(MolrgLabError):
    """Requested subspace dimensions do not fit in the ambient dimension."""


class OverlapUnsupported(MolrgLabError):
    """Overlapping subspaces are only constructed for two classes."""


class InvalidForUnequalDims(MolrgLabError):
    """Closed-form expressions require equal per-class subspace dimensions."""


class EmptyBatch(MolrgLabError):
    """Operation requires at least one sample."""


class ShapeMismatch(MolrgLabError):
    """Array shapes are inconsistent with each other."""


class ClassMissing(MolrgLabError):
    """Every class must be represented by at least one sample."""


class RankTooLarge(MolrgLabError):
    """Requested PCA rank exceeds the available per-class sample count."""


class SingleClassBatch(MolrgLabError):
    """Probe training requires at least two distinct classes."""


class LevelMismatch(MolrgLabError):
    """Ensemble models and feature batches must align level by level."""


class SampleMisalignment(MolrgLabError):
    """Ensemble feature batches must share the same evaluation samples."""


class WrongClassCount(MolrgLabError):
    """Operation is defined only for a specific number of classes."""


class CurveTooShort(MolrgLabError):
    """Curve diagnostics need at least three points."""


class SchemaMismatch(MolrgLabError):
    """CSV input does not carry the expected columns."""


class UnknownExperiment(MolrgLabError):
    """Experiment name is not in the registry."""


class InvalidSpec(MolrgLabError):
    """Experiment specification failed validation."""
