"""Exception types raised across the treecarbon package.

Every failure mode callers are expected to handle has its own class so that
tests and pipeline stages can catch precisely what they mean to catch.  All
of them derive from :class:`TreeCarbonError`.
"""


class TreeCarbonError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(TreeCarbonError, ValueError):
    """An argument violates a documented precondition."""


class ValidationError(TreeCarbonError):
    """Input data fails a structural or semantic check."""


class UnsupportedFormatError(TreeCarbonError):
    """File uses a layout, compression or sample type outside the supported subset."""


class ParseError(TreeCarbonError):
    """File is structurally broken (truncated, inconsistent counts, ...).

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GeoreferenceError(TreeCarbonError):
    """Georeferencing tags are missing, malformed, or unsupported (rotation)."""


class IncompleteCoverageError(TreeCarbonError):
    """A tile merge did not cover the full grid; ``missing`` lists offsets."""

    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class EmptySelectionError(TreeCarbonError):
    """A point filter or mask selected nothing to operate on."""


class NoGroundSurfaceError(TreeCarbonError):
    """Point cloud holds no ground-classified returns; no terrain model possible."""


class QuantizationOverflowError(TreeCarbonError):
    """Coordinate cannot be represented with the file's scale/offset."""


class InsufficientCoverageError(TreeCarbonError):
    """Too few raster cells fall inside a polygon to produce a statistic."""


class EmptySegmentationError(TreeCarbonError):
    """Watershed invoked without any markers."""


class DeserializationError(TreeCarbonError):
    """Serialized model payload is corrupt, truncated, or version-incompatible."""


class SingularFitError(TreeCarbonError):
    """Regression impossible: all regressor values identical."""


class InsufficientDataError(TreeCarbonError):
    """Fewer samples than the fit requires."""


class CalibrationError(TreeCarbonError):
    """No allometric model could be established for any species."""


class OverlapError(TreeCarbonError):
    """Geometries overlap where they must not; ``ids`` names the offenders."""

    def __init__(self, message: str, ids=()):
        super().__init__(message)
        self.ids = list(ids)


class AmbiguityError(TreeCarbonError):
    """A point falls into more than one aggregation region."""


class PlacementError(TreeCarbonError):
    """Synthetic scene could not place all trees without overlap."""


class ConfigError(TreeCarbonError):
    """Pipeline configuration is invalid or incomplete."""


class StageError(TreeCarbonError):
    """A pipeline stage failed; carries the stage name and the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
