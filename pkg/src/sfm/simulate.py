"""Monte Carlo harness for estimator accuracy experiments.

Each trial sketches ``n`` fresh distinct items, privatizes (and optionally
merges ``k`` privatized copies), estimates, and records the estimate. Trial
items are the integers ``trial << 40 | i`` so every trial sees a distinct,
collision-free item set. All randomness is derived from the simulation seed
and the trial coordinates, never from iteration order, so any subset of the
grid reproduces the same numbers.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import SaturationError
from .estimate import N_CAP, BitCounts, estimated_std_error, solve_counts
from .merge import BoolOp, eps_star_or, merge_sym_randomized, merge_xor_many
from .pcsa import MASK64, PcsaSketch, SketchParams
from .privacy import (
    NO_PRIVACY,
    FlipMechanism,
    RandomSource,
    mechanism_sym,
    mechanism_xor,
    privatize,
)

log = logging.getLogger(__name__)

TRIAL_SHIFT = 40


class Method(str, enum.Enum):
    SFM_SYM = "sfm_sym"
    SFM_XOR = "sfm_xor"
    NON_PRIVATE = "non_private"


class MergeSplit(str, enum.Enum):
    SAME = "same"          # k independently privatized copies of one item set
    DISJOINT = "disjoint"  # the item set cut into k contiguous parts


@dataclass(frozen=True)
class SimulationSpec:
    methods: tuple[Method, ...] = (Method.SFM_SYM,)
    epsilons: tuple[float, ...] = (1.0,)
    buckets: tuple[int, ...] = (4096,)
    levels: int = 24
    cardinalities: tuple[int, ...] = (10**6,)
    trials: int = 1000
    merge_fanout: int = 1
    seed: int = 0
    merge_split: MergeSplit = MergeSplit.SAME

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "merge_split", MergeSplit(self.merge_split))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.merge_fanout < 1:
            raise ValueError("merge fanout must be >= 1")
        if any(n < 1 or n >= 1 << TRIAL_SHIFT for n in self.cardinalities):
            raise ValueError(f"cardinalities must lie in [1, 2**{TRIAL_SHIFT})")
        if any(not e > 0 for e in self.epsilons):
            raise ValueError("privacy budgets must be positive")
        if not 0 <= self.seed <= MASK64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class TrialMetrics:
    rrmse: float
    mse: float
    est_rel_se: float
    mean_estimate: float
    relative_efficiency: float | None = field(default=None)


def rrmse(estimates: Sequence[float], n: float) -> float:
    est = np.asarray(estimates, dtype=float)
    return float(np.sqrt(np.mean((est - n) ** 2)) / n)


def mse(estimates: Sequence[float], n: float) -> float:
    est = np.asarray(estimates, dtype=float)
    return float(np.mean((est - n) ** 2))


def relative_efficiency(reference: Sequence[float], other: Sequence[float], n: float) -> float:
    """``MSE(other) / MSE(reference)``: how many times more buckets ``other`` needs."""
    return mse(other, n) / mse(reference, n)


def trial_keys(trial: int, n: int) -> np.ndarray:
    base = np.uint64((trial << TRIAL_SHIFT) & MASK64)
    return np.arange(n, dtype=np.uint64) | base


def _eps_code(eps: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", float(eps)))[0]


def trial_rng(seed: int, trial: int, *coords: int) -> RandomSource:
    ss = np.random.SeedSequence([seed, trial, *coords])
    return RandomSource.from_generator(np.random.Generator(np.random.PCG64(ss)))


def base_mechanism(method: Method, eps: float) -> FlipMechanism:
    if method is Method.SFM_SYM:
        return mechanism_sym(eps)
    if method is Method.SFM_XOR:
        return mechanism_xor(eps)
    return NO_PRIVACY


def merged_mechanism(method: Method, eps: float, fanout: int) -> FlipMechanism:
    """Mechanism of a sketch merged from ``fanout`` copies at budget ``eps``."""
    if method is Method.NON_PRIVATE:
        return NO_PRIVACY
    eps_star = eps if fanout == 1 else eps_star_or([eps] * fanout)
    return base_mechanism(method, eps_star)


def build_parts(params: SketchParams, trial: int, n: int, fanout: int, split: MergeSplit) -> list[PcsaSketch]:
    keys = trial_keys(trial, n)
    if split is MergeSplit.DISJOINT and fanout > 1:
        return [PcsaSketch.from_keys(chunk, params) for chunk in np.array_split(keys, fanout)]
    return [PcsaSketch.from_keys(keys, params)] * fanout


def run_trial(
    parts: Sequence[PcsaSketch],
    method: Method,
    eps: float,
    rng: RandomSource,
) -> float:
    """Privatize, merge and estimate one trial; returns the estimate."""
    params = parts[0].params
    if method is Method.NON_PRIVATE:
        bits = np.logical_or.reduce([s.bits for s in parts])
        p, q = 1.0, 0.0
    else:
        mech = base_mechanism(method, eps)
        noisy = [privatize(s, mech, rng) for s in parts]
        if len(noisy) == 1:
            merged = noisy[0]
        elif method is Method.SFM_SYM:
            merged = merge_sym_randomized(noisy, BoolOp.OR, rng)
        else:
            merged = merge_xor_many(noisy)
        bits, p, q = merged.bits, merged.mech.p, merged.mech.q
    counts = BitCounts(np.count_nonzero(bits, axis=0).astype(np.int64), params.buckets)
    try:
        n_hat, _, converged, _ = solve_counts(counts, p, q)
    except SaturationError:
        log.warning("saturated sketch (method=%s, eps=%s); recording the search cap", method.value, eps)
        return N_CAP
    if not converged:
        log.warning("estimator did not converge (method=%s, eps=%s)", method.value, eps)
    return n_hat


def simulate_estimates(
    method: Method | str,
    eps: float,
    buckets: int,
    levels: int,
    n: int,
    trials: int,
    *,
    fanout: int = 1,
    seed: int = 0,
    split: MergeSplit | str = MergeSplit.SAME,
) -> np.ndarray:
    """Estimates from ``trials`` independent runs of one grid point."""
    spec = SimulationSpec(
        methods=(method,),
        epsilons=(eps,),
        buckets=(buckets,),
        levels=levels,
        cardinalities=(n,),
        trials=trials,
        merge_fanout=fanout,
        seed=seed,
        merge_split=split,
    )
    (result,) = _grid_estimates(spec).values()
    return result


def _grid_estimates(spec: SimulationSpec) -> dict[tuple, np.ndarray]:
    out: dict[tuple, np.ndarray] = {}
    combos = [
        (m, e) for m in spec.methods for e in (spec.epsilons if m is not Method.NON_PRIVATE else (math.inf,))
    ]
    k = spec.merge_fanout
    for b in spec.buckets:
        params = SketchParams(b, spec.levels, spec.seed)
        for n in spec.cardinalities:
            est = {c: np.empty(spec.trials) for c in combos}
            for trial in range(spec.trials):
                parts = build_parts(params, trial, n, k, spec.merge_split)
                for method, eps in combos:
                    rng = trial_rng(spec.seed, trial, b, n, k, list(Method).index(method), _eps_code(eps))
                    est[method, eps][trial] = run_trial(parts, method, eps, rng)
            for (method, eps), values in est.items():
                out[method, eps, b, n] = values
    return out


def run_simulation(spec: SimulationSpec) -> Iterator[dict]:
    """Yield one CSV row per (method, eps, B, n) grid point."""
    for (method, eps, b, n), values in _grid_estimates(spec).items():
        mech = merged_mechanism(method, eps, spec.merge_fanout)
        params = SketchParams(b, spec.levels, spec.seed)
        yield {
            "method": method.value,
            "eps": float(eps),
            "B": b,
            "P": spec.levels,
            "n": n,
            "trials": spec.trials,
            "rrmse": rrmse(values, n),
            "est_rel_se": estimated_std_error(n, params, mech.p, mech.q) / n,
            "mean_estimate": float(np.mean(values)),
        }


def metrics(estimates: Sequence[float], n: int, mech: FlipMechanism, params: SketchParams) -> TrialMetrics:
    return TrialMetrics(
        rrmse=rrmse(estimates, n),
        mse=mse(estimates, n),
        est_rel_se=estimated_std_error(n, params, mech.p, mech.q) / n,
        mean_estimate=float(np.mean(estimates)),
    )
