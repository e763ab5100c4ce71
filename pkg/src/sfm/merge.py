"""Merging and Boolean algebra on privatized sketches.

Two merge families are provided:

* ``merge_xor_deterministic`` -- plain bitwise xor of sketches privatized
  with :func:`~sfm.privacy.mechanism_xor`. The result is distributed as the
  xor mechanism applied to the or of the clean sketches.
* ``merge_sym_randomized`` -- for :func:`~sfm.privacy.mechanism_sym`
  sketches. Each output bit is a Bernoulli draw whose rate is looked up from
  the noisy input bits in a :class:`MergeTable`, so the result is distributed
  as the symmetric mechanism applied to the or (or the and) of the clean
  sketches.

``xor_sym`` and ``not_sym`` complete the Boolean operations for symmetric
sketches; neither needs fresh randomness.

The returned budget ``eps_star`` measures the noise level of the merged
sketch. It is not an additional privacy cost.
"""

from __future__ import annotations

import enum
import functools
import math
import warnings
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import (
    IncompatibleSketchError,
    InvalidBudgetError,
    MergeTableError,
    UnsupportedOperationError,
)
from .pcsa import check_compatible
from .privacy import (
    MechanismKind,
    PrivateSketch,
    RandomSource,
    mechanism_sym,
    mechanism_xor,
)

MAX_ARITY = 16
TABLE_TOL = 1e-10
LOW_BUDGET_WARNING = 1e-6


class BoolOp(str, enum.Enum):
    OR = "or"
    AND = "and"
    XOR = "xor"


def _check_eps(eps: Sequence[float], min_len: int = 2) -> list[float]:
    eps = [float(e) for e in eps]
    if len(eps) < min_len:
        raise ValueError(f"need at least {min_len} budgets, got {len(eps)}")
    for e in eps:
        if not e > 0 or math.isnan(e):
            raise InvalidBudgetError(f"privacy budgets must be positive, got {e!r}")
    return eps


def _log1mexp(x: float) -> float:
    """log(1 - exp(-x)) for x > 0."""
    if x < math.log(2.0):
        return math.log(-math.expm1(-x))
    return math.log1p(-math.exp(-x))


def eps_star_or(eps: Sequence[float]) -> float:
    """Budget after an or (or and) merge: ``-log(1 - prod(1 - e^-eps_i))``.

    Computed entirely in log space so that tiny and huge budgets keep full
    relative precision.
    """
    eps = _check_eps(eps)
    if any(math.isinf(e) for e in eps):
        finite = [e for e in eps if not math.isinf(e)]
        if not finite:
            return math.inf
        return finite[0] if len(finite) == 1 else eps_star_or(finite)
    log_prod = math.fsum(_log1mexp(e) for e in eps)
    return -math.log(-math.expm1(log_prod))


eps_star_and = eps_star_or


def eps_star_xor(eps: Sequence[float]) -> float:
    """Budget after a plain xor of symmetric sketches, folded pairwise.

    For two inputs this is ``log(1 + e^(a+b)) - log(e^a + e^b)``.
    """
    eps = _check_eps(eps)
    acc = eps[0]
    for b in eps[1:]:
        a = acc
        if a + b < 700:
            # log1p form keeps precision when both budgets are small
            acc = math.log1p(math.expm1(a) * math.expm1(b) / (math.exp(a) + math.exp(b)))
        else:
            acc = np.logaddexp(0.0, a + b) - np.logaddexp(a, b)
    return float(acc)


def combine_eps(op: BoolOp | str, eps: Sequence[float]) -> float:
    op = BoolOp(op)
    return eps_star_xor(eps) if op is BoolOp.XOR else eps_star_or(eps)


def _sym_q(eps: float) -> float:
    return 1.0 / (math.exp(eps) + 1.0) if eps < 709 else 0.0


def _apply_kron(mats: Sequence[np.ndarray], vec: np.ndarray) -> np.ndarray:
    """Compute ``(M_1 kron ... kron M_k) @ vec`` without forming the product."""
    k = len(mats)
    t = vec.reshape((2,) * k)
    for axis, m in enumerate(mats):
        t = np.moveaxis(np.tensordot(m, t, axes=([1], [axis])), 0, axis)
    return t.reshape(-1)


@dataclass(frozen=True)
class MergeTable:
    """Bernoulli output rates of a randomized merge, indexed by noisy input tuples.

    ``probs[index]`` is the rate for inputs ``(x_1, ..., x_k)`` with
    ``index = sum(x_i << (k - i))``, i.e. the first operand is the most
    significant bit.
    """

    eps: tuple[float, ...]
    probs: np.ndarray
    eps_star: float
    target_op: BoolOp
    residual: float

    @property
    def arity(self) -> int:
        return len(self.eps)

    def rate(self, bits: Sequence[int]) -> float:
        index = 0
        for b in bits:
            index = (index << 1) | int(bool(b))
        return float(self.probs[index])


def target_column(q_star: float, k: int, op: BoolOp) -> np.ndarray:
    """Output-1 rates of the merged mechanism for each clean input tuple."""
    v = np.empty(2**k)
    if op is BoolOp.OR:
        v.fill(1.0 - q_star)
        v[0] = q_star
    else:
        v.fill(q_star)
        v[-1] = 1.0 - q_star
    return v


def _inverse_column(eps: Sequence[float], binding: int) -> np.ndarray:
    """Column ``binding`` (0 = all-zeros input, -1 = all-ones) of the inverse kernel product.

    The inverse symmetric kernel has diagonal ``1 / (1 - e^-eps)`` and
    off-diagonal ``-1 / (e^eps - 1)``; the column of a Kronecker product is
    the outer product of the factor columns.
    """
    col = np.ones(1)
    for e in eps:
        diag = -1.0 / math.expm1(-e)
        off = -1.0 / math.expm1(e)
        pair = (diag, off) if binding == 0 else (off, diag)
        col = np.multiply.outer(col, pair).reshape(-1)
    return col


def _build_table(eps: tuple[float, ...], op: BoolOp) -> MergeTable:
    k = len(eps)
    eps_star = eps_star_or(eps)
    q_star = _sym_q(eps_star)
    spread = math.tanh(0.5 * eps_star)  # 1 - 2 q*
    # target = q* 1 +- (1 - 2q*) e_binding and every inverse-kernel row sums to 1,
    # so the solve collapses to one column of the inverse product
    if op is BoolOp.OR:
        t = (1.0 - q_star) - spread * _inverse_column(eps, 0)
    else:
        t = q_star + spread * _inverse_column(eps, -1)
    forward = [np.array([[1.0 - qi, qi], [qi, 1.0 - qi]]) for qi in map(_sym_q, eps)]
    target = target_column(q_star, k, op)
    if not np.all(np.isfinite(t)):
        raise MergeTableError(f"non-finite merge table for budgets {eps}")
    if t.min() < -TABLE_TOL or t.max() > 1.0 + TABLE_TOL:
        raise MergeTableError(
            f"merge table outside [0, 1] by more than {TABLE_TOL}: [{t.min()}, {t.max()}]"
        )
    residual = float(np.max(np.abs(_apply_kron(forward, t) - target)))
    if residual > TABLE_TOL:
        raise MergeTableError(f"merge table reconstruction residual {residual:.3g}")
    # the binding entry sits analytically on the boundary; snap rounding noise
    if op is BoolOp.OR:
        t[0] = 0.0
    else:
        t[-1] = 1.0
    t[np.abs(t) <= TABLE_TOL] = 0.0
    t[np.abs(1.0 - t) <= TABLE_TOL] = 1.0
    t = np.clip(t, 0.0, 1.0)
    t.setflags(write=False)
    return MergeTable(eps, t, eps_star, op, residual)


@functools.lru_cache(maxsize=256)
def _cached_table(key: tuple[float, ...], op: BoolOp) -> MergeTable:
    return _build_table(key, op)


def build_merge_table(eps: Sequence[float], op: BoolOp | str = BoolOp.OR) -> MergeTable:
    """Randomized merge table for ``k`` symmetric sketches with budgets ``eps``.

    Tables are cached per operand-ordered budget tuple rounded to 12
    significant digits.
    """
    op = BoolOp(op)
    if op is BoolOp.XOR:
        raise UnsupportedOperationError("xor needs no table; use xor_sym")
    eps = _check_eps(eps)
    if len(eps) > MAX_ARITY:
        raise MergeTableError(f"arity {len(eps)} exceeds {MAX_ARITY}")
    key = tuple(float(f"{e:.12g}") for e in eps)
    return _cached_table(key, op)


def _check_operands(sketches: Sequence[PrivateSketch], kind: MechanismKind) -> None:
    if len(sketches) < 2:
        raise ValueError("merging needs at least two sketches")
    for i, s in enumerate(sketches):
        if s.kind is not kind:
            raise IncompatibleSketchError(
                f"operand {i} has mechanism kind {s.kind.name}, expected {kind.name}"
            )
        check_compatible(sketches[0], s)
    ids = [id(s) for s in sketches] + [id(s.bits) for s in sketches]
    if len(set(ids)) != len(ids):
        raise IncompatibleSketchError("operands must carry independent noise; got the same sketch twice")


def _warn_budget(eps_star: float) -> None:
    if eps_star < LOW_BUDGET_WARNING:
        warnings.warn(
            f"merged budget {eps_star:.3g} is below {LOW_BUDGET_WARNING}; the result is almost pure noise",
            RuntimeWarning,
            stacklevel=3,
        )


def merge_xor_deterministic(a: PrivateSketch, b: PrivateSketch) -> PrivateSketch:
    """Xor-merge two xor-mechanism sketches."""
    _check_operands([a, b], MechanismKind.XOR)
    eps_star = eps_star_or([a.mech.epsilon, b.mech.epsilon])
    _warn_budget(eps_star)
    return PrivateSketch(
        a.params, a.bits ^ b.bits, mechanism_xor(eps_star), a.merge_count + b.merge_count + 1
    )


def merge_xor_many(sketches: Sequence[PrivateSketch]) -> PrivateSketch:
    _check_operands(sketches, MechanismKind.XOR)
    out = sketches[0]
    for s in sketches[1:]:
        out = merge_xor_deterministic(out, s)
    return out


def merge_sym_randomized(
    sketches: Sequence[PrivateSketch],
    op: BoolOp | str,
    rng: RandomSource,
) -> PrivateSketch:
    """Simultaneous randomized or/and merge of ``k >= 2`` symmetric sketches.

    One uniform is drawn per bit position, in C order.
    """
    op = BoolOp(op)
    if op is BoolOp.XOR:
        raise UnsupportedOperationError("use xor_sym for xor of symmetric sketches")
    _check_operands(sketches, MechanismKind.SYM)
    table = build_merge_table([s.mech.epsilon for s in sketches], op)
    _warn_budget(table.eps_star)
    index = np.zeros(sketches[0].bits.shape, dtype=np.int64)
    for s in sketches:
        index = (index << 1) | s.bits
    u = rng.random(index.size).reshape(index.shape)
    bits = u < table.probs[index]
    merges = sum(s.merge_count for s in sketches) + len(sketches) - 1
    return PrivateSketch(sketches[0].params, bits, mechanism_sym(table.eps_star), merges)


def xor_sym(a: PrivateSketch, b: PrivateSketch) -> PrivateSketch:
    """Plain xor of two symmetric sketches; the result is symmetric again."""
    _check_operands([a, b], MechanismKind.SYM)
    eps_star = eps_star_xor([a.mech.epsilon, b.mech.epsilon])
    _warn_budget(eps_star)
    return PrivateSketch(
        a.params, a.bits ^ b.bits, mechanism_sym(eps_star), a.merge_count + b.merge_count + 1
    )


def not_sym(a: PrivateSketch) -> PrivateSketch:
    """Complement a symmetric sketch. Negation commutes only with q = 1 - p."""
    if a.kind is not MechanismKind.SYM:
        raise UnsupportedOperationError(
            f"negation is only defined for symmetric sketches, not {a.kind.name}"
        )
    return PrivateSketch(a.params, ~a.bits, a.mech, a.merge_count)


def merge(
    sketches: Sequence[PrivateSketch],
    op: BoolOp | str = BoolOp.OR,
    rng: RandomSource | None = None,
) -> PrivateSketch:
    """Dispatch on mechanism kind and operation.

    xor-kind sketches support only ``or`` (realized as a deterministic xor);
    symmetric sketches support ``or`` and ``and`` (randomized) and ``xor``.
    """
    op = BoolOp(op)
    if len(sketches) < 2:
        raise ValueError("merging needs at least two sketches")
    kinds = {s.kind for s in sketches}
    if len(kinds) > 1:
        raise IncompatibleSketchError(f"cannot merge mixed mechanism kinds {sorted(k.name for k in kinds)}")
    kind = kinds.pop()
    if kind is MechanismKind.XOR and op is BoolOp.OR:
        return merge_xor_many(sketches)
    if kind is MechanismKind.SYM:
        if op is BoolOp.XOR:
            _check_operands(sketches, MechanismKind.SYM)
            out = sketches[0]
            for s in sketches[1:]:
                out = xor_sym(out, s)
            return out
        if rng is None:
            raise ValueError("randomized merges need a RandomSource")
        return merge_sym_randomized(sketches, op, rng)
    raise UnsupportedOperationError(f"operation {op.value!r} is not supported for {kind.name} sketches")
