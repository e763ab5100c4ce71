"""PCSA (FM85) bitmap sketches.

A sketch is a ``B x P`` bit matrix. Every item is hashed to one bucket,
chosen uniformly, and one level, drawn from a Geometric(1/2) law capped at
``P``; inserting the item sets that single bit. Sketches built with the same
parameters combine losslessly with a bitwise or.

Items are hashed in two stages. Byte strings are first reduced to a 64-bit
key with BLAKE2b; keys are then mixed with two seed-derived splitmix64
finalizers, one for the bucket and one for the level. The simulation harness
feeds sequential integers straight into the second stage.
"""

from __future__ import annotations

import hashlib
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from .errors import IncompatibleSketchError

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_BUCKET_SALT = 0x6A09E667F3BCC909
_LEVEL_SALT = 0xBB67AE8584CAA73B


def splitmix64(x: int) -> int:
    """Scalar splitmix64 step, used for seed derivation."""
    z = (x + _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64(keys: np.ndarray, seed: int) -> np.ndarray:
    """Vectorized splitmix64 finalizer of ``keys ^ seed``."""
    z = keys ^ np.uint64(seed)
    with np.errstate(over="ignore"):
        z = z + np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _bit_length32(x: np.ndarray) -> np.ndarray:
    # frexp is exact for integers below 2**53
    _, exp = np.frexp(x.astype(np.float64))
    return exp.astype(np.int64)


def leading_zeros64(words: np.ndarray) -> np.ndarray:
    """Count leading zero bits of each uint64 in ``words``."""
    words = np.asarray(words, dtype=np.uint64)
    hi = words >> np.uint64(32)
    lo = words & np.uint64(0xFFFFFFFF)
    return np.where(hi > 0, 32 - _bit_length32(hi), 64 - _bit_length32(lo))


def key_of(item: bytes) -> int:
    """Reduce a byte string to the 64-bit key fed to the sketch hash."""
    return int.from_bytes(hashlib.blake2b(item, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class SketchParams:
    """Shape and hash seed of a sketch. Sketches merge only if these match."""

    buckets: int
    levels: int
    hash_seed: int = 0

    def __post_init__(self):
        if int(self.buckets) < 1 or int(self.levels) < 1:
            raise ValueError("buckets and levels must be positive")
        if self.buckets * self.levels > 1 << 32:
            raise ValueError("buckets * levels must not exceed 2**32")
        if not 0 <= self.hash_seed <= MASK64:
            raise ValueError("hash_seed must be a 64-bit unsigned integer")

    @property
    def size(self) -> int:
        return self.buckets * self.levels

    @property
    def bucket_seed(self) -> int:
        return splitmix64(self.hash_seed ^ _BUCKET_SALT)

    @property
    def level_seed(self) -> int:
        return splitmix64(self.hash_seed ^ _LEVEL_SALT)


@dataclass(frozen=True)
class HashedItem:
    """Sketch coordinates of one item: 0-based bucket, 1-based level."""

    bucket: int
    value: int


def hash_keys(keys: np.ndarray, params: SketchParams) -> tuple[np.ndarray, np.ndarray]:
    """Map 64-bit keys to ``(bucket, level)`` arrays.

    Buckets come from a multiply-shift of the top 32 bits of one hash onto
    ``[0, B)``. Levels are ``min(P, 1 + clz)`` of an independently seeded
    hash, so ``Pr(level = j) = 2**-j`` for ``j < P``.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    hb = _mix64(keys, params.bucket_seed)
    hl = _mix64(keys, params.level_seed)
    bucket = ((hb >> np.uint64(32)) * np.uint64(params.buckets)) >> np.uint64(32)
    level = np.minimum(params.levels, 1 + leading_zeros64(hl))
    return bucket.astype(np.int64), level.astype(np.int64)


def hash_item(item: bytes, params: SketchParams) -> HashedItem:
    bucket, level = hash_keys(np.array([key_of(item)], dtype=np.uint64), params)
    return HashedItem(int(bucket[0]), int(level[0]))


class PcsaSketch:
    """Non-private PCSA sketch.

    ``bits[i, j - 1]`` is set iff some inserted item hashed to bucket ``i``
    and level ``j``.
    """

    def __init__(self, params: SketchParams, bits: np.ndarray | None = None):
        self.params = params
        shape = (params.buckets, params.levels)
        if bits is None:
            bits = np.zeros(shape, dtype=bool)
        else:
            bits = np.asarray(bits, dtype=bool)
            if bits.shape != shape:
                raise ValueError(f"bit matrix shape {bits.shape} != {shape}")
        self.bits = bits

    @classmethod
    def from_items(cls, items: Iterable[bytes], params: SketchParams) -> PcsaSketch:
        sketch = cls(params)
        sketch.update(items)
        return sketch

    @classmethod
    def from_keys(cls, keys: np.ndarray, params: SketchParams) -> PcsaSketch:
        sketch = cls(params)
        sketch.add_keys(keys)
        return sketch

    def add(self, item: bytes) -> None:
        h = hash_item(item, self.params)
        self.bits[h.bucket, h.value - 1] = True

    def update(self, items: Iterable[bytes]) -> None:
        keys = np.fromiter((key_of(x) for x in items), dtype=np.uint64)
        self.add_keys(keys)

    def add_keys(self, keys: np.ndarray) -> None:
        """Insert pre-reduced 64-bit keys in bulk."""
        bucket, level = hash_keys(keys, self.params)
        self.bits[bucket, level - 1] = True

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def copy(self) -> PcsaSketch:
        return PcsaSketch(self.params, self.bits.copy())

    def __eq__(self, other):
        if not isinstance(other, PcsaSketch):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        p = self.params
        return f"PcsaSketch(B={p.buckets}, P={p.levels}, seed={p.hash_seed}, ones={self.popcount()})"


def insert(sketch: PcsaSketch, item: bytes) -> PcsaSketch:
    """Return a copy of ``sketch`` with ``item`` inserted."""
    out = sketch.copy()
    out.add(item)
    return out


def check_compatible(a, b) -> None:
    if a.params != b.params:
        raise IncompatibleSketchError(f"sketch parameters differ: {a.params} vs {b.params}")


def merge_exact(a: PcsaSketch, b: PcsaSketch) -> PcsaSketch:
    """Bitwise-or merge; the result summarizes the union of both inputs."""
    check_compatible(a, b)
    return PcsaSketch(a.params, a.bits | b.bits)
