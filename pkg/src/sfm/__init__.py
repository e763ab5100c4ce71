"""Sketch-Flip-Merge: mergeable, differentially private distinct-count sketches."""

from .errors import (
    IncompatibleSketchError,
    InvalidBudgetError,
    MechanismError,
    SfmError,
    UnsupportedOperationError,
)
from .estimate import (
    BitCounts,
    EstimateResult,
    estimate_cardinality,
    estimated_std_error,
    log_composite_likelihood,
)
from .merge import (
    BoolOp,
    MergeTable,
    build_merge_table,
    eps_star_or,
    eps_star_xor,
    merge,
    merge_sym_randomized,
    merge_xor_deterministic,
    not_sym,
    xor_sym,
)
from .pcsa import HashedItem, PcsaSketch, SketchParams, hash_item, merge_exact
from .privacy import (
    FlipMechanism,
    MechanismKind,
    PrivateSketch,
    RandomSource,
    mechanism_sym,
    mechanism_xor,
    privatize,
    validate_dp,
)

__version__ = "0.1.0"
