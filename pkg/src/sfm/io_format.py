"""Binary sketch files and experiment CSV output.

File layout (all integers little-endian)::

    magic       4s   b"SFM1"
    version     u8   1
    mechanism   u8   0 none, 1 sym, 2 xor, 3 custom (p, q)
    buckets     u32
    levels      u32
    hash_seed   u64
    p, q, eps   f64 x 3
    merges      u32
    payload     ceil(B * P / 8) bytes

Bit ``(i, j)`` (0-based bucket, 1-based level) is bit number
``i * P + (j - 1)`` of the payload, least significant bit first in each byte.
Unused bits of the last byte must be zero.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from collections.abc import Iterable
from typing import BinaryIO, TextIO

import numpy as np

from .errors import (
    BadMagicError,
    HeaderInconsistencyError,
    NonzeroPaddingError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .pcsa import PcsaSketch, SketchParams
from .privacy import (
    FlipMechanism,
    MechanismKind,
    PrivateSketch,
    sym_p,
    validate_dp,
)

MAGIC = b"SFM1"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sBBIIQdddI")
CSV_COLUMNS = ("method", "eps", "B", "P", "n", "trials", "rrmse", "est_rel_se", "mean_estimate")

_CROSS_CHECK_RTOL = 1e-12


def payload_size(params: SketchParams) -> int:
    return (params.size + 7) // 8


def encode_header(params: SketchParams, mech: FlipMechanism, merge_count: int) -> bytes:
    return HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        int(mech.kind),
        params.buckets,
        params.levels,
        params.hash_seed,
        mech.p,
        mech.q,
        mech.epsilon,
        merge_count,
    )


def encode_payload(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool).reshape(-1), bitorder="little").tobytes()


def dumps(sketch: PcsaSketch | PrivateSketch) -> bytes:
    if isinstance(sketch, PrivateSketch):
        mech, merges = sketch.mech, sketch.merge_count
    else:
        mech, merges = FlipMechanism(1.0, 0.0, math.inf, MechanismKind.NONE), 0
    return encode_header(sketch.params, mech, merges) + encode_payload(sketch.bits)


def write_sketch(sketch: PcsaSketch | PrivateSketch, sink: BinaryIO) -> int:
    """Serialize ``sketch`` to ``sink`` and return the number of bytes written."""
    data = dumps(sketch)
    sink.write(data)
    return len(data)


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=_CROSS_CHECK_RTOL, abs_tol=0.0)


def _decode_mechanism(tag: int, p: float, q: float, eps: float) -> FlipMechanism:
    try:
        kind = MechanismKind(tag)
    except ValueError:
        raise HeaderInconsistencyError(f"unknown mechanism tag {tag}") from None
    if kind is MechanismKind.NONE:
        if (p, q, eps) != (1.0, 0.0, math.inf):
            raise HeaderInconsistencyError("tag 0 requires p=1, q=0, eps=inf")
    elif not (eps > 0 and math.isfinite(eps)):
        raise HeaderInconsistencyError(f"private mechanism with budget {eps}")
    elif kind is MechanismKind.SYM:
        if not (_close(q, 1.0 - p) and _close(p, sym_p(eps))):
            raise HeaderInconsistencyError(f"sym header has p={p}, q={q}, eps={eps}")
    elif kind is MechanismKind.XOR:
        if not (p == 0.5 and _close(q, 0.5 * math.exp(-eps))):
            raise HeaderInconsistencyError(f"xor header has p={p}, q={q}, eps={eps}")
    elif not (q <= 0.5 <= p and validate_dp(p, q, eps)):
        raise HeaderInconsistencyError(f"custom header (p={p}, q={q}) is not {eps}-DP")
    return FlipMechanism(p, q, eps, kind)


def _read_exact(source: BinaryIO, size: int, what: str) -> bytes:
    data = source.read(size)
    if len(data) != size:
        raise TruncatedPayloadError(f"{what}: expected {size} bytes, got {len(data)}")
    return data


def read_sketch(source: BinaryIO) -> PcsaSketch | PrivateSketch:
    """Inverse of :func:`write_sketch`.

    Tag-0 files decode to :class:`PcsaSketch`; all others to
    :class:`PrivateSketch`.
    """
    head = source.read(HEADER.size)
    if head[:4] != MAGIC[: len(head)]:
        raise BadMagicError(f"bad magic {head[:4]!r}")
    if len(head) < HEADER.size:
        raise TruncatedPayloadError(f"header: expected {HEADER.size} bytes, got {len(head)}")
    magic, version, tag, buckets, levels, seed, p, q, eps, merges = HEADER.unpack(head)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} is not supported")
    try:
        params = SketchParams(buckets, levels, seed)
    except ValueError as exc:
        raise HeaderInconsistencyError(str(exc)) from None
    mech = _decode_mechanism(tag, p, q, eps)
    if mech.kind is MechanismKind.NONE and merges != 0:
        raise HeaderInconsistencyError("non-private sketches carry no merge count")

    payload = _read_exact(source, payload_size(params), "payload")
    flat = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), bitorder="little")
    if flat[params.size:].any():
        raise NonzeroPaddingError("padding bits after the last sketch bit must be zero")
    bits = flat[: params.size].astype(bool).reshape(buckets, levels)
    if mech.kind is MechanismKind.NONE:
        return PcsaSketch(params, bits)
    return PrivateSketch(params, bits, mech, merges)


def loads(data: bytes) -> PcsaSketch | PrivateSketch:
    return read_sketch(io.BytesIO(data))


def save(sketch: PcsaSketch | PrivateSketch, path) -> int:
    with open(path, "wb") as fh:
        return write_sketch(sketch, fh)


def load(path) -> PcsaSketch | PrivateSketch:
    with open(path, "rb") as fh:
        return read_sketch(fh)


def format_float(x: float) -> str:
    """Shortest round-tripping decimal, never localized or grouped."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def write_csv(rows: Iterable[dict], sink: TextIO) -> int:
    """Write experiment rows with the fixed column order; returns the row count."""
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    count = 0
    for row in rows:
        writer.writerow(
            format_float(row[c]) if isinstance(row[c], float) else str(row[c]) for c in CSV_COLUMNS
        )
        count += 1
    return count
