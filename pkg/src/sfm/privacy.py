"""Randomized-response bit-flip mechanisms.

A mechanism ``F(p, q)`` keeps a 1 with probability ``p`` and turns a 0 into
a 1 with probability ``q``. Applied independently to every bit of a sketch it
is epsilon-DP exactly when ``p, q`` lie in (0, 1) and
``max(p / q, (1 - q) / (1 - p)) <= exp(epsilon)``.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBudgetError, MechanismError
from .pcsa import PcsaSketch, SketchParams

# Relative slack when comparing the flip ratios against exp(epsilon).
DP_RTOL = 1e-12


class MechanismKind(enum.IntEnum):
    NONE = 0
    SYM = 1
    XOR = 2
    CUSTOM = 3


def validate_dp(p: float, q: float, epsilon: float) -> bool:
    """True iff F(p, q) is epsilon-DP on sensitivity-1 bit vectors."""
    if not (0.0 < p < 1.0 and 0.0 < q < 1.0):
        return False
    if not epsilon > 0:
        return False
    bound = math.exp(epsilon) if epsilon < 709 else math.inf
    ratio = max(p / q, (1.0 - q) / (1.0 - p))
    return ratio <= bound * (1.0 + DP_RTOL)


def _check_budget(epsilon: float) -> float:
    epsilon = float(epsilon)
    if not (epsilon > 0) or math.isinf(epsilon):
        raise InvalidBudgetError(f"privacy budget must be a positive finite real, got {epsilon!r}")
    return epsilon


@dataclass(frozen=True)
class FlipMechanism:
    """A validated ``(p, q)`` flip pair with its budget and construction tag."""

    p: float
    q: float
    epsilon: float
    kind: MechanismKind

    def __post_init__(self):
        if self.kind is MechanismKind.NONE:
            if (self.p, self.q) != (1.0, 0.0) or self.epsilon != math.inf:
                raise MechanismError("the identity mechanism has p=1, q=0, epsilon=inf")
            return
        if not self.q <= 0.5 <= self.p:
            raise MechanismError(f"need q <= 1/2 <= p, got p={self.p}, q={self.q}")
        if not validate_dp(self.p, self.q, self.epsilon):
            raise MechanismError(
                f"F(p={self.p}, q={self.q}) is not {self.epsilon}-differentially private"
            )

    @property
    def is_private(self) -> bool:
        return self.kind is not MechanismKind.NONE


NO_PRIVACY = FlipMechanism(1.0, 0.0, math.inf, MechanismKind.NONE)


def sym_p(epsilon: float) -> float:
    # e^eps / (e^eps + 1) without overflow
    return 1.0 / (1.0 + math.exp(-epsilon))


def mechanism_sym(epsilon: float) -> FlipMechanism:
    """Classical randomized response: ``p = e^eps / (e^eps + 1)``, ``q = 1 - p``."""
    epsilon = _check_budget(epsilon)
    q = 1.0 / (1.0 + math.exp(epsilon)) if epsilon < 709 else 0.0
    if q == 0.0:
        raise InvalidBudgetError(f"budget {epsilon} too large to represent q > 0")
    return FlipMechanism(1.0 - q, q, epsilon, MechanismKind.SYM)


def mechanism_xor(epsilon: float) -> FlipMechanism:
    """Asymmetric mechanism compatible with the xor merge: ``p = 1/2``, ``q = e^-eps / 2``."""
    epsilon = _check_budget(epsilon)
    q = 0.5 * math.exp(-epsilon)
    if q == 0.0:
        raise InvalidBudgetError(f"budget {epsilon} too large to represent q > 0")
    return FlipMechanism(0.5, q, epsilon, MechanismKind.XOR)


def mechanism_custom(p: float, q: float, epsilon: float) -> FlipMechanism:
    return FlipMechanism(float(p), float(q), _check_budget(epsilon), MechanismKind.CUSTOM)


def mechanism_pagh_stausholm(epsilon: float) -> FlipMechanism:
    """The ``p = 1/2``, ``q = 1/(2 + eps)`` flip pair of Pagh and Stausholm.

    Its ``(p, q)`` at budget ``2 (e^eps - 1)`` coincide with
    :func:`mechanism_xor` at ``eps``.
    """
    epsilon = _check_budget(epsilon)
    return mechanism_custom(0.5, 1.0 / (2.0 + epsilon), epsilon)


class RandomSource:
    """Uniform variates, either reproducible (seeded PCG64) or from the OS.

    Seeded sources must be used only for tests and simulations; releasing a
    sketch privatized with a known seed voids the privacy guarantee.
    """

    def __init__(self, seed: int | None = None, *, secure: bool = False):
        if secure == (seed is not None):
            raise ValueError("give exactly one of seed= or secure=True")
        self.seed = seed
        self.secure = secure
        self._gen = None if secure else np.random.Generator(np.random.PCG64(seed))

    @classmethod
    def seeded(cls, seed: int) -> RandomSource:
        return cls(seed)

    @classmethod
    def from_generator(cls, gen: np.random.Generator) -> RandomSource:
        src = cls.__new__(cls)
        src.seed, src.secure, src._gen = None, False, gen
        return src

    @classmethod
    def system(cls) -> RandomSource:
        return cls(secure=True)

    def random(self, size: int) -> np.ndarray:
        """``size`` doubles uniform on [0, 1) with 53 random bits each."""
        if self._gen is not None:
            return self._gen.random(size)
        words = np.frombuffer(os.urandom(8 * size), dtype="<u8")
        return (words >> np.uint64(11)).astype(np.float64) * 2.0**-53


def flip_bits(bits: np.ndarray, p: float, q: float, rng: RandomSource) -> np.ndarray:
    """Apply F(p, q) independently to every entry of a boolean array.

    One uniform is drawn per entry in C order, so seeded output depends only
    on the seed and the array shape.
    """
    u = rng.random(bits.size).reshape(bits.shape)
    return np.where(bits, u < p, u < q)


@dataclass(eq=False)
class PrivateSketch:
    """A sketch whose bits went through a flip mechanism."""

    params: SketchParams
    bits: np.ndarray
    mech: FlipMechanism
    merge_count: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        shape = (self.params.buckets, self.params.levels)
        if self.bits.shape != shape:
            raise ValueError(f"bit matrix shape {self.bits.shape} != {shape}")
        if self.merge_count < 0:
            raise ValueError("merge_count must be non-negative")

    @property
    def kind(self) -> MechanismKind:
        return self.mech.kind

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, PrivateSketch):
            return NotImplemented
        return (
            self.params == other.params
            and self.mech == other.mech
            and self.merge_count == other.merge_count
            and np.array_equal(self.bits, other.bits)
        )


def privatize(sketch: PcsaSketch, mech: FlipMechanism, rng: RandomSource) -> PrivateSketch:
    """Randomize every bit of ``sketch`` with ``mech``; the input is left untouched."""
    if not isinstance(mech, FlipMechanism):
        raise MechanismError(f"expected a FlipMechanism, got {type(mech).__name__}")
    if mech.kind is MechanismKind.NONE:
        return PrivateSketch(sketch.params, sketch.bits.copy(), mech)
    if not validate_dp(mech.p, mech.q, mech.epsilon):
        raise MechanismError(f"{mech} fails the differential privacy constraint")
    return PrivateSketch(sketch.params, flip_bits(sketch.bits, mech.p, mech.q, rng), mech)
