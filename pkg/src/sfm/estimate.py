"""Composite marginal likelihood estimation of cardinality.

Every bit at level ``j`` is zero before privatization with probability
``gamma_j ** n`` where ``gamma_j = 1 - 2**-min(j, P-1) / B``. After the flip
mechanism the bit is one with probability ``p - (p - q) gamma_j ** n``.
Summing the per-bit log marginals gives a surrogate log-likelihood that
depends on the sketch only through the number of ones per level, which is
what all functions here consume.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, MechanismError, SaturationError
from .pcsa import PcsaSketch, SketchParams
from .privacy import PrivateSketch

# Returned by log_composite_likelihood for observations impossible at n.
IMPOSSIBLE = -sys.float_info.max

N_CAP = 2.0**62
N_FLOOR = 1e-9
MAX_ITER = 200
STEP_RTOL = 1e-6
SCORE_TOL = 1e-12


@dataclass(frozen=True)
class LevelProfile:
    """Per-level cell survival probabilities ``gamma`` and their logs."""

    gamma: np.ndarray
    log_gamma: np.ndarray

    @classmethod
    def for_shape(cls, buckets: int, levels: int) -> LevelProfile:
        j = np.arange(1, levels + 1)
        rho = np.exp2(-np.minimum(j, max(levels - 1, 0)).astype(float)) / buckets
        if np.any(rho >= 1.0):
            raise DomainError("a 1x1 sketch carries no cardinality information")
        return cls(1.0 - rho, np.log1p(-rho))


@dataclass(frozen=True)
class BitCounts:
    """Number of one bits at each level, summed over buckets."""

    ones_per_level: np.ndarray
    buckets: int

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> BitCounts:
        bits = np.asarray(bits, dtype=bool)
        return cls(bits.sum(axis=0).astype(np.int64), bits.shape[0])

    @property
    def levels(self) -> int:
        return len(self.ones_per_level)

    @property
    def zeros_per_level(self) -> np.ndarray:
        return self.buckets - self.ones_per_level

    @property
    def profile(self) -> LevelProfile:
        return LevelProfile.for_shape(self.buckets, self.levels)


@dataclass(frozen=True)
class EstimateResult:
    n_hat: float
    std_err: float
    iterations: int
    converged: bool
    bracket: tuple[float, float]

    @property
    def rel_std_err(self) -> float:
        return self.std_err / self.n_hat if self.n_hat > 0 else math.inf


def _check_pq(p: float, q: float) -> None:
    if not (0.0 <= q < p <= 1.0):
        raise MechanismError(f"estimation needs 0 <= q < p <= 1, got p={p}, q={q}")


def _terms(n: float, lg: np.ndarray, p: float, q: float):
    """Survival ``g = gamma**n``, its complement, and the zero/one bit probabilities."""
    x = n * lg
    g = np.exp(x)
    omg = -np.expm1(x)
    prob0 = (1.0 - p) * omg + (1.0 - q) * g
    prob1 = p * omg + q * g
    return g, prob0, prob1


def _zero_ratio(g: np.ndarray, prob0: np.ndarray, p: float, q: float) -> np.ndarray:
    """``g / prob0``; for p = 1 this is exactly ``1 / (1 - q)`` even after underflow."""
    if p == 1.0:
        return np.full_like(g, 1.0 / (1.0 - q))
    return np.divide(g, prob0, out=np.zeros_like(g), where=prob0 > 0)


def log_composite_likelihood(n: float, counts: BitCounts, p: float, q: float) -> float:
    """Level-aggregated composite log-likelihood of cardinality ``n``.

    Returns :data:`IMPOSSIBLE` when some observed bit has probability zero
    under ``n`` (e.g. any one bit at ``n = 0`` without privacy).
    """
    _check_pq(p, q)
    if n < 0:
        raise DomainError(f"cardinality must be non-negative, got {n}")
    lg = counts.profile.log_gamma
    ones = counts.ones_per_level
    zeros = counts.zeros_per_level
    g, prob0, prob1 = _terms(n, lg, p, q)
    if np.any((ones > 0) & (prob1 <= 0)):
        return IMPOSSIBLE
    if p == 1.0:
        log0 = math.log1p(-q) + n * lg
    else:
        log0 = np.log(prob0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log1 = np.log(prob1)
    with np.errstate(invalid="ignore"):
        total = np.sum(np.where(zeros > 0, zeros * log0, 0.0)) + np.sum(
            np.where(ones > 0, ones * log1, 0.0)
        )
    return float(total)


def score(n: float, counts: BitCounts, p: float, q: float) -> float:
    """First derivative of :func:`log_composite_likelihood` in ``n``."""
    _check_pq(p, q)
    lg = counts.profile.log_gamma
    g, prob0, prob1 = _terms(n, lg, p, q)
    d = p - q
    zero_part = counts.zeros_per_level * d * lg * _zero_ratio(g, prob0, p, q)
    with np.errstate(divide="ignore", invalid="ignore"):
        one_part = np.where(
            counts.ones_per_level > 0, counts.ones_per_level * d * lg * g / prob1, 0.0
        )
    return float(np.sum(zero_part) - np.sum(one_part))


def curvature(n: float, counts: BitCounts, p: float, q: float) -> float:
    """Second derivative of :func:`log_composite_likelihood` in ``n``."""
    _check_pq(p, q)
    lg = counts.profile.log_gamma
    g, prob0, prob1 = _terms(n, lg, p, q)
    d = p - q
    lg2 = lg * lg
    if p == 1.0:
        zero_part = np.zeros_like(g)
    else:
        zero_part = counts.zeros_per_level * (1.0 - p) * d * lg2 * _zero_ratio(g, prob0, p, q) / prob0
    with np.errstate(divide="ignore", invalid="ignore"):
        one_part = np.where(
            counts.ones_per_level > 0,
            counts.ones_per_level * p * d * lg2 * g / (prob1 * prob1),
            0.0,
        )
    return float(np.sum(zero_part) - np.sum(one_part))


def expected_counts(n: float, buckets: int, levels: int, p: float, q: float) -> np.ndarray:
    """Expected ones per level, ``B (p - (p - q) gamma_j ** n)``, as floats."""
    profile = LevelProfile.for_shape(buckets, levels)
    _, _, prob1 = _terms(n, profile.log_gamma, p, q)
    return buckets * prob1


def estimated_std_error(n: float, params: SketchParams, p: float, q: float) -> float:
    """Standard error from the expected curvature, ``(-E[l''(n)]) ** -0.5``."""
    _check_pq(p, q)
    if not n > 0 or math.isinf(n):
        raise DomainError(f"standard error needs a positive finite n, got {n}")
    profile = LevelProfile.for_shape(params.buckets, params.levels)
    lg = profile.log_gamma
    g, prob0, prob1 = _terms(n, lg, p, q)
    bracket = p / prob1
    if p < 1.0:
        bracket = bracket - (1.0 - p) / prob0
    info = params.buckets * (p - q) * np.sum(lg * lg * g * bracket)
    if not info > 0:
        raise DomainError(f"non-positive expected information {info} at n={n}")
    return float(info**-0.5)


def mechanism_pq(sketch) -> tuple[float, float]:
    if isinstance(sketch, PcsaSketch):
        return 1.0, 0.0
    return sketch.mech.p, sketch.mech.q


def solve_counts(counts: BitCounts, p: float, q: float, n_cap: float = N_CAP):
    """Maximize the composite likelihood over ``[0, n_cap]``.

    Returns ``(n_hat, iterations, converged, (low, high))``. A root of the
    score is bracketed by doubling from 1 and then polished with Newton
    steps, falling back to bisection whenever a step leaves the bracket or
    the curvature is not negative.
    """
    _check_pq(p, q)
    if score(N_FLOOR, counts, p, q) <= 0:
        return 0.0, 0, True, (0.0, 0.0)
    lo, hi = N_FLOOR, 1.0
    # a score of exactly zero this far out means every gamma**n underflowed and
    # the likelihood is flat at its limit, which is still a saturated sketch
    while score(hi, counts, p, q) >= 0:
        lo = hi
        hi *= 2.0
        if hi > n_cap:
            raise SaturationError(f"score still positive at n = {n_cap:.3g}; sketch is saturated")

    tol_score = SCORE_TOL * counts.buckets * counts.levels
    x = 0.5 * (lo + hi)
    for it in range(1, MAX_ITER + 1):
        s = score(x, counts, p, q)
        if s > 0:
            lo = x
        else:
            hi = x
        if abs(s) <= tol_score:
            return x, it, True, (lo, hi)
        c = curvature(x, counts, p, q)
        x_new = x - s / c if c < 0 else math.nan
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        step = x_new - x
        x = x_new
        if abs(step) <= STEP_RTOL * max(1.0, x):
            return x, it, True, (lo, hi)
    return 0.5 * (lo + hi), MAX_ITER, False, (lo, hi)


def estimate_cardinality(sketch: PcsaSketch | PrivateSketch) -> EstimateResult:
    """Composite maximum likelihood estimate of the number of distinct items."""
    p, q = mechanism_pq(sketch)
    counts = BitCounts.from_bits(sketch.bits)
    n_hat, iterations, converged, bracket = solve_counts(counts, p, q)
    # the standard error formula needs n > 0; report the one-item scale for empty sketches
    std_err = estimated_std_error(max(n_hat, 1.0), sketch.params, p, q)
    return EstimateResult(n_hat, std_err, iterations, converged, bracket)
