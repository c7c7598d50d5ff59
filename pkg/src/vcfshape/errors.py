"""Exception hierarchy shared across the pipeline.

Two broad families map onto CLI exit codes: ValidationError (exit 2) for
bad parameters, schemas, or configuration, and DataError (exit 3) for
input data the pipeline cannot process.
"""


class VcfShapeError(Exception):
    exit_code = 1


class ValidationError(VcfShapeError):
    """Invalid parameters, configuration, or schema mismatch."""

    exit_code = 2


class DataError(VcfShapeError):
    """Input data is malformed or unusable."""

    exit_code = 3


class FormatError(DataError):
    """File contents violate the expected on-disk format."""


class UnsupportedTypeError(FormatError):
    """Voxel payload type the loader does not accept."""


class ResourceError(DataError):
    """Volume dimensions exceed the configured memory budget."""


class EmptyMaskError(DataError):
    """Requested label is absent from the volume."""


class EmptyInputError(DataError):
    """Operation received an empty mask or cloud."""


class TooSmallError(DataError):
    """Connected component below the minimum voxel count."""


class ResolutionError(ValidationError):
    """Phantom spacing too coarse to resolve the body."""


class DegenerateGeometryError(DataError):
    """Normal directions too degenerate to cluster."""


class AmbiguousPoseError(DataError):
    """Inferior and posterior surface candidates nearly parallel."""


class ProjectionFailureError(DataError):
    """Height-map projection produced no valid cells."""


class FeatureFailureError(DataError):
    """A section required by the fixed rules is invalid."""


class DivisionGuardError(DataError):
    """Ratio denominator is zero."""


class ScanExcludedError(DataError):
    """Scan lacks the minimum number of usable vertebrae."""


class MissingFeatureError(ValidationError):
    """Rule references a feature absent from the vector."""


class DegenerateLabelsError(DataError):
    """Training labels contain a single class."""


class ConvergenceError(DataError):
    """Iterative solver failed to converge within its sweep budget."""
