import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfm.errors import IncompatibleSketchError
from sfm.pcsa import (
    HashedItem,
    PcsaSketch,
    SketchParams,
    hash_item,
    hash_keys,
    insert,
    key_of,
    leading_zeros64,
    merge_exact,
)

PARAMS = SketchParams(64, 24, 7)
items = st.lists(st.binary(max_size=12), max_size=60)


def test_params_validation():
    with pytest.raises(ValueError):
        SketchParams(0, 4)
    with pytest.raises(ValueError):
        SketchParams(4, 0)
    with pytest.raises(ValueError):
        SketchParams(1 << 20, 1 << 13)
    with pytest.raises(ValueError):
        SketchParams(4, 4, -1)


def test_single_level_and_single_bucket():
    for i in range(50):
        assert hash_item(b"x%d" % i, SketchParams(16, 1, 3)).value == 1
        assert hash_item(b"x%d" % i, SketchParams(1, 24, 3)).bucket == 0


def test_golden_vector():
    # frozen at build time; guards against accidental hash changes
    assert hash_item(b"alpha", SketchParams(16, 24, 42)) == HashedItem(bucket=0, value=3)
    assert key_of(b"alpha") == key_of(b"alpha")


def test_hash_depends_on_seed():
    a = [hash_item(b"item-%d" % i, SketchParams(1024, 24, 1)) for i in range(200)]
    b = [hash_item(b"item-%d" % i, SketchParams(1024, 24, 2)) for i in range(200)]
    assert sum(x == y for x, y in zip(a, b)) < 20


@pytest.mark.parametrize(
    "word, expected",
    [(0, 64), (1, 63), (0xFFFFFFFF, 32), (1 << 32, 31), (1 << 63, 0), ((1 << 64) - 1, 0), (1 << 53, 10)],
)
def test_leading_zeros(word, expected):
    assert leading_zeros64(np.array([word], dtype=np.uint64))[0] == expected


def test_leading_zeros_matches_bit_length():
    rng = np.random.default_rng(0)
    words = rng.integers(0, 2**64, 5000, dtype=np.uint64, endpoint=False) >> rng.integers(0, 64, 5000).astype(np.uint64)
    expected = [64 - int(w).bit_length() for w in words]
    assert leading_zeros64(words).tolist() == expected


def test_insert_sets_exactly_one_bit():
    s = insert(PcsaSketch(PARAMS), b"hello")
    assert s.popcount() == 1
    h = hash_item(b"hello", PARAMS)
    assert s.bits[h.bucket, h.value - 1]


def test_insert_does_not_modify_input():
    base = PcsaSketch(PARAMS)
    insert(base, b"hello")
    assert base.popcount() == 0


def test_bulk_insert_matches_replay():
    rng = np.random.default_rng(5)
    params = SketchParams(64, 24, 11)
    raw = [rng.bytes(16) for _ in range(10_000)]
    sketch = PcsaSketch.from_items(raw, params)
    replay = np.zeros((64, 24), dtype=bool)
    for item in raw:
        h = hash_item(item, params)
        replay[h.bucket, h.value - 1] = True
    assert sketch.popcount() == int(replay.sum())
    assert np.array_equal(sketch.bits, replay)


@given(items)
def test_duplicate_insensitive(xs):
    once = PcsaSketch.from_items(xs, PARAMS)
    twice = PcsaSketch.from_items(xs + xs, PARAMS)
    assert once == twice


@given(items, st.randoms(use_true_random=False))
def test_order_invariant(xs, rnd):
    shuffled = list(xs)
    rnd.shuffle(shuffled)
    assert PcsaSketch.from_items(xs, PARAMS) == PcsaSketch.from_items(shuffled, PARAMS)


@given(items, items)
def test_merge_is_union(xs, ys):
    a = PcsaSketch.from_items(xs, PARAMS)
    b = PcsaSketch.from_items(ys, PARAMS)
    assert merge_exact(a, b) == PcsaSketch.from_items(xs + ys, PARAMS)


@given(items, items, items)
@settings(max_examples=50)
def test_merge_algebra(xs, ys, zs):
    a, b, c = (PcsaSketch.from_items(v, PARAMS) for v in (xs, ys, zs))
    empty = PcsaSketch(PARAMS)
    assert merge_exact(a, empty) == a
    assert merge_exact(a, a) == a
    assert merge_exact(a, b) == merge_exact(b, a)
    assert merge_exact(merge_exact(a, b), c) == merge_exact(a, merge_exact(b, c))


def test_merge_rejects_mismatched_params():
    with pytest.raises(IncompatibleSketchError):
        merge_exact(PcsaSketch(SketchParams(8, 8, 1)), PcsaSketch(SketchParams(8, 8, 2)))
    with pytest.raises(IncompatibleSketchError):
        merge_exact(PcsaSketch(SketchParams(8, 8)), PcsaSketch(SketchParams(16, 8)))


def test_level_distribution():
    n = 2_000_000
    levels = 24
    params = SketchParams(1024, levels, 99)
    _, value = hash_keys(np.arange(n, dtype=np.uint64), params)
    observed = np.bincount(value, minlength=levels + 1)[1:]
    j = np.arange(1, levels + 1)
    prob = np.exp2(-j.astype(float))
    prob[-1] = 2.0 ** -(levels - 1)
    assert prob.sum() == pytest.approx(1.0)
    sd = np.sqrt(n * prob * (1 - prob))
    assert np.all(np.abs(observed - n * prob) <= 5 * sd)


def test_bucket_uniformity():
    from scipy import stats

    n, buckets = 1_000_000, 1000
    bucket, _ = hash_keys(np.arange(n, dtype=np.uint64), SketchParams(buckets, 24, 5))
    counts = np.bincount(bucket, minlength=buckets)
    assert counts.size == buckets
    _, pvalue = stats.chisquare(counts)
    assert pvalue > 1e-4


def test_bucket_and_level_independent():
    from scipy import stats

    bucket, value = hash_keys(np.arange(400_000, dtype=np.uint64), SketchParams(4, 4, 8))
    table = np.zeros((4, 4))
    np.add.at(table, (bucket, value - 1), 1)
    assert stats.chi2_contingency(table).pvalue > 1e-4
