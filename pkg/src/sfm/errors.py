"""Exception hierarchy shared by every sfm module."""


class SfmError(Exception):
    """Base class for all errors raised by this package."""


class IncompatibleSketchError(SfmError, ValueError):
    """Sketches cannot be combined (shape, seed, mechanism kind or identity)."""


class InvalidBudgetError(SfmError, ValueError):
    """A privacy budget is not a positive real."""


class MechanismError(SfmError, ValueError):
    """A flip mechanism violates its (p, q, epsilon) invariants."""


class UnsupportedOperationError(SfmError, ValueError):
    """The requested operation is not defined for this mechanism kind."""


class MergeTableError(SfmError, ValueError):
    """A merge table could not be built or failed its validity checks."""


class EstimationError(SfmError, ArithmeticError):
    """Cardinality estimation failed."""


class SaturationError(EstimationError):
    """The likelihood is still increasing at the search cap."""


class DomainError(EstimationError, ValueError):
    """Inputs outside the domain of an estimation formula."""


class SketchFormatError(SfmError, ValueError):
    """A serialized sketch is malformed."""


class BadMagicError(SketchFormatError):
    pass


class UnsupportedVersionError(SketchFormatError):
    pass


class HeaderInconsistencyError(SketchFormatError):
    pass


class TruncatedPayloadError(SketchFormatError):
    pass


class NonzeroPaddingError(SketchFormatError):
    pass
