import math

import numpy as np
import pytest

from oracles import sym_pq
from sfm.errors import DomainError, MechanismError, SaturationError
from sfm.estimate import (
    IMPOSSIBLE,
    BitCounts,
    LevelProfile,
    curvature,
    estimate_cardinality,
    estimated_std_error,
    expected_counts,
    log_composite_likelihood,
    score,
    solve_counts,
)
from sfm.merge import eps_star_or
from sfm.pcsa import PcsaSketch, SketchParams
from sfm.privacy import NO_PRIVACY, PrivateSketch, RandomSource, mechanism_sym, mechanism_xor, privatize
from sfm.simulate import simulate_estimates, trial_keys


def per_bit_loglik(n, bits, p, q):
    """Naive sum of log marginals over every cell."""
    B, P = bits.shape
    total = 0.0
    for i in range(B):
        for j in range(1, P + 1):
            rho = 2.0 ** -min(j, P - 1) / B
            g = (1 - rho) ** n
            one = p - (p - q) * g
            total += math.log(one if bits[i, j - 1] else 1 - one)
    return total


def counts_from_expected(n, B, P, p, q):
    return BitCounts(np.rint(expected_counts(n, B, P, p, q)).astype(np.int64), B)


# --- level profile -------------------------------------------------------


@pytest.mark.parametrize("B, P", [(1, 24), (16, 3), (4096, 24), (3, 1), (2, 2)])
def test_level_profile_mass(B, P):
    prof = LevelProfile.for_shape(B, P)
    assert math.fsum(1 - prof.gamma) == pytest.approx(1 / B, rel=1e-14)
    assert np.all((prof.gamma > 0) & (prof.gamma < 1))
    assert prof.log_gamma == pytest.approx(np.log(prof.gamma), rel=1e-14)


def test_level_profile_degenerate():
    with pytest.raises(DomainError):
        LevelProfile.for_shape(1, 1)


# --- likelihood ----------------------------------------------------------


def test_loglik_empty_at_zero():
    counts = BitCounts(np.zeros(24, dtype=np.int64), 64)
    assert log_composite_likelihood(0.0, counts, 1.0, 0.0) == 0.0


def test_loglik_impossible_sentinel():
    ones = np.zeros(24, dtype=np.int64)
    ones[3] = 1
    counts = BitCounts(ones, 64)
    assert log_composite_likelihood(0.0, counts, 1.0, 0.0) == IMPOSSIBLE
    assert log_composite_likelihood(5.0, counts, 1.0, 0.0) > IMPOSSIBLE


def test_loglik_small_instance_matches_per_bit_sum():
    bits = np.array([[1, 0, 0], [1, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=bool)
    p, q = 0.731059, 0.268941
    got = log_composite_likelihood(10.0, BitCounts.from_bits(bits), p, q)
    assert got == pytest.approx(per_bit_loglik(10.0, bits, p, q), abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_level_aggregation_random(seed):
    rng = np.random.default_rng(seed)
    B, P = int(rng.integers(2, 40)), int(rng.integers(2, 12))
    bits = rng.random((B, P)) < rng.random()
    n = float(rng.uniform(0, 500))
    for p, q in [sym_pq(rng.uniform(0.1, 5)), (0.5, 0.5 * math.exp(-1.3))]:
        got = log_composite_likelihood(n, BitCounts.from_bits(bits), p, q)
        assert got == pytest.approx(per_bit_loglik(n, bits, p, q), rel=1e-12, abs=1e-12)


def test_invalid_mechanism():
    counts = BitCounts(np.zeros(4, dtype=np.int64), 8)
    with pytest.raises(MechanismError):
        log_composite_likelihood(1.0, counts, 0.3, 0.3)
    with pytest.raises(MechanismError):
        score(1.0, counts, 0.2, 0.7)


# --- derivatives ---------------------------------------------------------

PQ_GRID = [sym_pq(e) for e in (0.25, 1.0, 4.0)] + [(0.5, 0.5 * math.exp(-1.0)), (1.0, 0.0)]


def _fd_counts(n, p, q, B=256, P=24):
    # counts generated away from n so the score is well away from zero
    return counts_from_expected(1.8 * n, B, P, p, q)


@pytest.mark.parametrize("n", [10.0, 1e3, 1e6])
@pytest.mark.parametrize("p, q", PQ_GRID)
def test_score_matches_finite_difference(n, p, q):
    counts = _fd_counts(n, p, q)
    h = max(1e-4, 1e-6 * n)
    fd = (log_composite_likelihood(n + h, counts, p, q) - log_composite_likelihood(n - h, counts, p, q)) / (2 * h)
    assert score(n, counts, p, q) == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("n", [10.0, 1e3, 1e6])
@pytest.mark.parametrize("p, q", PQ_GRID)
def test_curvature_matches_finite_difference(n, p, q):
    counts = _fd_counts(n, p, q)
    h = max(1e-4, 1e-6 * n)
    fd = (score(n + h, counts, p, q) - score(n - h, counts, p, q)) / (2 * h)
    assert curvature(n, counts, p, q) == pytest.approx(fd, rel=1e-5)


@pytest.mark.parametrize("n", [10.0, 1e3, 1e5, 1e6])
@pytest.mark.parametrize("p, q", PQ_GRID)
def test_score_vanishes_at_expected_counts(n, p, q):
    B, P = 4096, 24
    lg = LevelProfile.for_shape(B, P).log_gamma
    # real-valued expected counts, fed through the score formula directly
    ones = expected_counts(n, B, P, p, q)
    counts = BitCounts(ones, B)
    s = score(n, counts, p, q)
    scale = B * (p - q) * np.sum(np.abs(lg))
    assert abs(s) <= 1e-10 * scale


@pytest.mark.parametrize("n", [50.0, 1e4, 1e6])
@pytest.mark.parametrize("p, q", PQ_GRID)
def test_std_error_is_expected_curvature(n, p, q):
    params = SketchParams(4096, 24)
    counts = BitCounts(expected_counts(n, 4096, 24, p, q), 4096)
    assert estimated_std_error(n, params, p, q) == pytest.approx((-curvature(n, counts, p, q)) ** -0.5, rel=1e-12)


def test_std_error_bucket_slope():
    bs = np.array([256, 1024, 4096, 16384])
    for eps in (0.5, 1.0, 2.0, 4.0):
        p, q = sym_pq(eps)
        se = [estimated_std_error(1e6, SketchParams(int(b), 24), p, q) for b in bs]
        slope = np.polyfit(np.log(bs), np.log(se), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.02)
        assert all(a > b for a, b in zip(se, se[1:]))


def test_std_error_domain():
    with pytest.raises(DomainError):
        estimated_std_error(0.0, SketchParams(64, 24), 0.7, 0.3)


# --- solver --------------------------------------------------------------


def test_empty_sketch_estimates_zero():
    res = estimate_cardinality(PcsaSketch(SketchParams(4096, 24)))
    assert res.n_hat == 0.0 and res.converged
    empty_private = PrivateSketch(SketchParams(64, 24), np.zeros((64, 24), dtype=bool), NO_PRIVACY)
    assert estimate_cardinality(empty_private).n_hat == 0.0


def test_noise_floor_estimates_zero():
    p, q = sym_pq(1.0)
    counts = BitCounts(np.full(24, 10, dtype=np.int64), 1024)  # well below q * B
    assert solve_counts(counts, p, q)[0] == 0.0


def test_saturation():
    full = PcsaSketch(SketchParams(64, 24), np.ones((64, 24), dtype=bool))
    with pytest.raises(SaturationError):
        estimate_cardinality(full)


@pytest.mark.parametrize("n", [300.0, 2e4, 3e6])
@pytest.mark.parametrize("p, q", PQ_GRID)
def test_solver_recovers_n_from_expected_counts(n, p, q):
    counts = BitCounts(expected_counts(n, 4096, 24, p, q), 4096)
    n_hat, _, converged, (lo, hi) = solve_counts(counts, p, q)
    assert converged
    assert lo <= n_hat <= hi
    # the score-based stopping rule leaves an error that is negligible against the SE
    se = estimated_std_error(n, SketchParams(4096, 24), p, q)
    assert abs(n_hat - n) <= 1e-2 * se
    assert n_hat == pytest.approx(n, rel=1e-4)


def test_estimate_is_deterministic():
    params = SketchParams(1024, 24, 3)
    s = PcsaSketch.from_keys(trial_keys(0, 50_000), params)
    priv = privatize(s, mechanism_sym(1.0), RandomSource.seeded(9))
    a = estimate_cardinality(priv)
    b = estimate_cardinality(PrivateSketch(params, priv.bits.copy(), priv.mech))
    assert a == b
    assert a.std_err > 0 and a.rel_std_err == a.std_err / a.n_hat


def test_non_private_single_sketch():
    params = SketchParams(4096, 24, 5)
    s = PcsaSketch.from_keys(trial_keys(1, 100_000), params)
    res = estimate_cardinality(s)
    assert res.converged
    assert abs(res.n_hat / 1e5 - 1) < 5 * res.std_err / 1e5


def test_xor_private_estimate():
    params = SketchParams(4096, 24, 5)
    n = 200_000
    s = PcsaSketch.from_keys(trial_keys(2, n), params)
    res = estimate_cardinality(privatize(s, mechanism_xor(2.0), RandomSource.seeded(4)))
    assert abs(res.n_hat / n - 1) < 5 * res.std_err / n


# --- Monte Carlo ---------------------------------------------------------


@pytest.mark.slow
def test_score_unbiased_at_truth():
    n, B, P = 100_000, 1024, 24
    mech = mechanism_sym(1.0)
    params = SketchParams(B, P, 11)
    rng = RandomSource.seeded(12)
    scores = []
    for trial in range(2000):
        s = PcsaSketch.from_keys(trial_keys(trial, n), params)
        scores.append(score(n, BitCounts.from_bits(privatize(s, mech, rng).bits), mech.p, mech.q))
    scores = np.array(scores)
    assert abs(scores.mean()) <= 3 * scores.std(ddof=1) / math.sqrt(len(scores))


@pytest.mark.slow
def test_private_median_relative_error():
    n = 1_000_000
    est = simulate_estimates("sfm_sym", 1.0, 4096, 24, n, 200, seed=21)
    assert np.median(np.abs(est / n - 1)) < 0.1


def test_non_private_error_band():
    n, B = 10_000, 4096
    est = simulate_estimates("non_private", math.inf, B, 24, n, 200, seed=22)
    rel = math.sqrt(np.mean((est / n - 1) ** 2))
    # real sketches beat the classical 0.78/sqrt(B) constant; only the upper side is checked
    assert rel <= 1.2 * 0.78 / math.sqrt(B)


def test_non_private_independent_bit_oracle():
    # with genuinely independent Bernoulli cells the likelihood is exact and the analytic SE is attained
    n, B, P = 10_000, 4096, 24
    rng = np.random.default_rng(23)
    prob = expected_counts(n, B, P, 1.0, 0.0) / B
    est = []
    for _ in range(300):
        bits = rng.random((B, P)) < prob
        est.append(solve_counts(BitCounts.from_bits(bits), 1.0, 0.0)[0])
    rel = math.sqrt(np.mean((np.array(est) / n - 1) ** 2))
    se = estimated_std_error(n, SketchParams(B, P), 1.0, 0.0) / n
    assert rel == pytest.approx(se, rel=0.15)


@pytest.mark.slow
def test_merged_estimate_matches_std_error():
    n = 1_000_000
    est = simulate_estimates("sfm_sym", 2.0, 4096, 24, n, 200, fanout=4, seed=24)
    p, q = sym_pq(eps_star_or([2.0] * 4))
    se = estimated_std_error(n, SketchParams(4096, 24), p, q) / n
    rel = math.sqrt(np.mean((est / n - 1) ** 2))
    assert rel == pytest.approx(se, rel=0.15)
