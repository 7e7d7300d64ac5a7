"""Offline caches for the light, medium and heavy serving tiers.

* light: item id -> code index, per group (storage grows with the item count)
* medium: per-user assignment in compressed-sparse-column layout
* heavy: per-user codeword aggregates ``delta^T V`` and ``delta^T 1``, plus
  one kernel-weighted pair per temporal scale

All three serialize to one little-endian binary format::

    magic   4s   b"VQLC"
    version u16
    rtype   u16  1=bundle 2=csc 3=light
    N, d_g, L, M   4 x u64
    group   u32
    pad     u32
    checksum u64 FNV-1a of the codebook payload (0 = unchecked)
    payload_len u64
    payload  float64 / int64 little-endian, row-major
    crc32   u32  of the payload
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    CorruptionError,
    CorruptPayloadError,
    ParameterError,
    RecordTypeError,
    ShapeError,
    StaleChecksumError,
    TruncatedFileError,
    VersionMismatchError,
)
from .numkern import DTYPE
from .vq import Assignment, Codebook, assign_nearest

MAGIC = b"VQLC"
FORMAT_VERSION = 1
RECORD_BUNDLE, RECORD_CSC, RECORD_LIGHT = 1, 2, 3
_HEADER = struct.Struct("<4sHH4QIIQQ")
_TRAILER = struct.Struct("<I")
PAIRWISE_THRESHOLD = 1024

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def codebook_checksum(codebook: Codebook) -> int:
    payload = np.ascontiguousarray(codebook.codewords, dtype="<f8").tobytes()
    return fnv1a_64(payload)


# ---------------------------------------------------------------- CSC


@dataclass
class AssignmentCSC:
    num_codes: int
    num_events: int
    col_ptr: np.ndarray
    row_idx: np.ndarray

    def __post_init__(self):
        self.col_ptr = np.asarray(self.col_ptr, dtype=np.int64)
        self.row_idx = np.asarray(self.row_idx, dtype=np.int64)

    def validate(self):
        cp, ri = self.col_ptr, self.row_idx
        if cp.shape != (self.num_codes + 1,) or ri.shape != (self.num_events,):
            raise CorruptionError("CSC arrays have the wrong length")
        if cp[0] != 0 or cp[-1] != self.num_events or np.any(np.diff(cp) < 0):
            raise CorruptionError("CSC column pointers are inconsistent")
        if self.num_events and (ri.min() < 0 or ri.max() >= self.num_events):
            raise CorruptionError("CSC row index out of range")
        if np.unique(ri).size != self.num_events:
            raise CorruptionError("an event appears in more than one column")

    def bucket(self, j: int) -> np.ndarray:
        return self.row_idx[self.col_ptr[j] : self.col_ptr[j + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.col_ptr)

    def to_assignment(self) -> Assignment:
        idx = np.empty(self.num_events, dtype=np.int64)
        for j in range(self.num_codes):
            idx[self.bucket(j)] = j
        return Assignment(idx, self.num_codes)

    def to_dense(self) -> np.ndarray:
        """The one-hot ``L x N`` matrix."""
        return self.to_assignment().one_hot()

    @classmethod
    def from_dense(cls, delta) -> "AssignmentCSC":
        delta = np.asarray(delta)
        if delta.ndim != 2 or not np.all(delta.sum(axis=1) == 1):
            raise CorruptionError("dense assignment must have exactly one 1 per row")
        return build_assignment_csc(Assignment(np.argmax(delta, axis=1), delta.shape[1]), delta.shape[1])

    def storage_counts(self) -> dict:
        return {"ints": int(self.col_ptr.size + self.row_idx.size), "floats": 0}


def build_assignment_csc(assignment: Assignment, num_codes: int) -> AssignmentCSC:
    idx = np.asarray(assignment.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= num_codes):
        raise CorruptionError(f"code index outside [0, {num_codes})")
    counts = np.bincount(idx, minlength=num_codes)
    col_ptr = np.zeros(num_codes + 1, dtype=np.int64)
    np.cumsum(counts, out=col_ptr[1:])
    # stable sort keeps ascending event order inside each column
    row_idx = np.argsort(idx, kind="stable").astype(np.int64)
    return AssignmentCSC(num_codes, idx.size, col_ptr, row_idx)


# ---------------------------------------------------------------- light


@dataclass
class LightCache:
    """Item id to code index, one column per group.

    ``item_ids`` is sorted so lookups are a binary search.
    """

    item_ids: np.ndarray
    codes: np.ndarray  # (I, G)
    num_codes: int
    codebook_checksums: tuple = ()

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim == 1:
            self.codes = self.codes[:, None]
        order = np.argsort(self.item_ids, kind="stable")
        self.item_ids, self.codes = self.item_ids[order], self.codes[order]

    @property
    def num_groups(self) -> int:
        return self.codes.shape[1]

    def __len__(self):
        return self.item_ids.size

    def lookup(self, items, group: int = 0) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.item_ids, items)
        pos = np.minimum(pos, max(self.item_ids.size - 1, 0))
        if items.size and (self.item_ids.size == 0 or np.any(self.item_ids[pos] != items)):
            raise KeyError("item id not present in light cache")
        return self.codes[pos, group]

    def as_dict(self, group: int = 0) -> dict:
        return dict(zip(self.item_ids.tolist(), self.codes[:, group].tolist()))

    def storage_counts(self) -> dict:
        return {"entries": len(self), "ints": int(self.codes.size)}


def build_light_cache(item_keys, codebooks, group_slices=None) -> LightCache:
    """Assign every item's key to its nearest codeword.

    ``item_keys`` is a mapping item id -> key vector, or a pair
    ``(item_ids, key_matrix)``. With several codebooks, ``group_slices`` says
    which channels of the key each codebook sees.
    """
    if isinstance(item_keys, dict):
        ids = np.fromiter(item_keys.keys(), dtype=np.int64, count=len(item_keys))
        keys = np.asarray([item_keys[i] for i in ids.tolist()], dtype=DTYPE)
    else:
        ids, keys = item_keys
        ids = np.asarray(ids, dtype=np.int64)
        keys = np.asarray(keys, dtype=DTYPE)
    if isinstance(codebooks, Codebook):
        codebooks = [codebooks]
    if group_slices is None:
        if len(codebooks) != 1:
            raise ConfigError("group slices required with several codebooks")
        group_slices = [slice(None)]
    if keys.ndim != 2:
        keys = keys.reshape(len(ids), -1)
    codes = np.stack(
        [assign_nearest(keys[:, sl], cb).indices for cb, sl in zip(codebooks, group_slices)], axis=1
    )
    return LightCache(ids, codes, codebooks[0].size, tuple(codebook_checksum(cb) for cb in codebooks))


# ---------------------------------------------------------------- heavy


@dataclass
class CacheBundle:
    """Codeword-bucket aggregates for one user and one group.

    ``v_cache``/``ones_cache`` are the plain sums. When temporal scales are
    present, ``scale_v[m]``/``scale_ones[m]`` hold the sums weighted by
    ``exp(lambdas[m] * (t - time_origin))``.
    """

    v_cache: np.ndarray
    ones_cache: np.ndarray
    event_count: int
    group_id: int = 0
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    scale_v: np.ndarray = None
    scale_ones: np.ndarray = None
    time_origin: float = 0.0
    codebook_checksum: int = 0

    def __post_init__(self):
        self.v_cache = np.asarray(self.v_cache, dtype=DTYPE)
        self.ones_cache = np.asarray(self.ones_cache, dtype=DTYPE).reshape(-1)
        self.lambdas = np.asarray(self.lambdas, dtype=DTYPE).reshape(-1)
        n, dg = self.v_cache.shape
        m = self.lambdas.size
        if self.scale_v is None:
            self.scale_v = np.zeros((m, n, dg))
        if self.scale_ones is None:
            self.scale_ones = np.zeros((m, n))
        self.scale_v = np.asarray(self.scale_v, dtype=DTYPE).reshape(m, n, dg)
        self.scale_ones = np.asarray(self.scale_ones, dtype=DTYPE).reshape(m, n)

    @property
    def num_codes(self) -> int:
        return self.v_cache.shape[0]

    @property
    def group_dim(self) -> int:
        return self.v_cache.shape[1]

    @property
    def num_scales(self) -> int:
        return self.lambdas.size

    def plain_pair(self):
        return self.v_cache, self.ones_cache

    def scale_pairs(self) -> list:
        return [(self.scale_v[m], self.scale_ones[m]) for m in range(self.num_scales)]

    def copy(self) -> "CacheBundle":
        return CacheBundle(
            self.v_cache.copy(),
            self.ones_cache.copy(),
            self.event_count,
            self.group_id,
            self.lambdas.copy(),
            self.scale_v.copy(),
            self.scale_ones.copy(),
            self.time_origin,
            self.codebook_checksum,
        )

    def storage_counts(self) -> dict:
        per_scale = self.num_codes * self.group_dim + self.num_codes
        return {
            "value_floats": int(self.v_cache.size),
            "ones_floats": int(self.ones_cache.size),
            "floats": per_scale * (1 + self.num_scales),
        }

    def nbytes(self) -> int:
        return 8 * self.storage_counts()["floats"]


def _bucket_sum(rows: np.ndarray) -> np.ndarray:
    """Sum rows in ascending order; pairwise tree above the threshold."""
    n = rows.shape[0]
    if n <= PAIRWISE_THRESHOLD:
        acc = np.zeros(rows.shape[1:], dtype=DTYPE)
        for r in rows:
            acc += r
        return acc
    half = n // 2
    return _bucket_sum(rows[:half]) + _bucket_sum(rows[half:])


def _aggregate(csc: AssignmentCSC, values: np.ndarray, weights=None):
    """Per-bucket sums of ``w_i * V_i`` and ``w_i`` following the CSC order."""
    n, dg = csc.num_codes, values.shape[1]
    v_out = np.zeros((n, dg), dtype=DTYPE)
    o_out = np.zeros(n, dtype=DTYPE)
    ordered = values[csc.row_idx]
    w = None if weights is None else np.asarray(weights, dtype=DTYPE)[csc.row_idx]
    if w is not None:
        ordered = ordered * w[:, None]
    # sequential in-order sums, vectorized across buckets with reduceat
    counts = csc.counts()
    small = (counts > 0) & (counts <= PAIRWISE_THRESHOLD)
    if np.any(small):
        starts = csc.col_ptr[:-1][small]
        v_out[small] = _inorder_reduceat(ordered, starts, counts[small])
        o_out[small] = (
            counts[small].astype(DTYPE)
            if w is None
            else _inorder_reduceat(w[:, None], starts, counts[small])[:, 0]
        )
    for j in np.flatnonzero(counts > PAIRWISE_THRESHOLD):
        sl = slice(csc.col_ptr[j], csc.col_ptr[j + 1])
        v_out[j] = _bucket_sum(ordered[sl])
        o_out[j] = float(counts[j]) if w is None else _bucket_sum(w[sl, None])[0]
    return v_out, o_out


def _inorder_reduceat(rows: np.ndarray, starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """``sum(rows[s:s+c])`` for each (s, c), strictly left to right."""
    out = rows[starts].copy()
    for k in range(1, int(counts.max())):
        live = counts > k
        out[live] += rows[starts[live] + k]
    return out


def build_heavy_cache(
    csc: AssignmentCSC,
    values,
    timestamps=None,
    temporal=None,
    group_id: int = 0,
    codebook_checksum: int = 0,
    time_origin=None,
) -> CacheBundle:
    """Aggregate values into codeword buckets.

    ``temporal`` may be a :class:`~vql.attention.TemporalConfig` or a plain
    sequence of decay rates. Timestamps are rebased to ``time_origin``
    (default: the latest event) so every history weight is at most one.
    """
    values = np.asarray(values, dtype=DTYPE)
    if values.ndim != 2 or values.shape[0] != csc.num_events:
        raise ShapeError("values must have one row per event")
    v, ones = _aggregate(csc, values)
    lambdas = np.zeros(0)
    scale_v = scale_ones = None
    origin = 0.0
    if temporal is not None:
        lambdas = np.asarray(getattr(temporal, "lambdas", temporal), dtype=DTYPE).reshape(-1)
        if timestamps is None:
            raise ConfigError("temporal caches need event timestamps")
        t = np.asarray(timestamps, dtype=DTYPE)
        if t.shape != (csc.num_events,):
            raise ShapeError("one timestamp per event expected")
        origin = float(t.max()) if time_origin is None else float(time_origin)
        if t.size and t.max() > origin:
            raise ConfigError("time origin must not precede any event")
        rebased = t - origin
        pairs = [_aggregate(csc, values, np.exp(lam * rebased)) for lam in lambdas]
        scale_v = np.stack([p[0] for p in pairs]) if pairs else None
        scale_ones = np.stack([p[1] for p in pairs]) if pairs else None
    return CacheBundle(
        v, ones, csc.num_events, group_id, lambdas, scale_v, scale_ones, origin, codebook_checksum
    )


def update_heavy_cache_incremental(bundle: CacheBundle, code: int, value, weight: float = 1.0, timestamp=None) -> CacheBundle:
    """Append one event to a bundle (returns a new bundle).

    ``weight`` scales the plain aggregate. For temporal bundles the event's
    ``timestamp`` is required; a timestamp past the current origin moves the
    origin forward and rescales the existing per-scale sums to match.
    """
    if not 0 <= code < bundle.num_codes:
        raise CorruptionError(f"code {code} outside [0, {bundle.num_codes})")
    if weight < 0:
        raise ParameterError("weight must be nonnegative")
    value = np.asarray(value, dtype=DTYPE).reshape(-1)
    out = bundle.copy()
    out.v_cache[code] += weight * value
    out.ones_cache[code] += weight
    out.event_count += 1
    if out.num_scales:
        if timestamp is None:
            raise ConfigError("temporal bundle needs the event timestamp")
        t = float(timestamp)
        if t > out.time_origin:
            if bundle.event_count:
                shrink = np.exp(-out.lambdas * (t - out.time_origin))
                out.scale_v *= shrink[:, None, None]
                out.scale_ones *= shrink[:, None]
            out.time_origin = t
        w = weight * np.exp(out.lambdas * (t - out.time_origin))
        out.scale_v[:, code] += w[:, None] * value
        out.scale_ones[:, code] += w
    return out


def empty_bundle(num_codes: int, group_dim: int, lambdas=(), group_id: int = 0, codebook_checksum: int = 0) -> CacheBundle:
    return CacheBundle(
        np.zeros((num_codes, group_dim)),
        np.zeros(num_codes),
        0,
        group_id,
        np.asarray(lambdas, dtype=DTYPE),
        codebook_checksum=codebook_checksum,
    )


# ---------------------------------------------------------------- serialization


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def encode_cache(obj, codebook_checksum_value=None) -> bytes:
    if isinstance(obj, CacheBundle):
        rtype = RECORD_BUNDLE
        dims = (obj.num_codes, obj.group_dim, obj.event_count, obj.num_scales)
        group = obj.group_id
        checksum = obj.codebook_checksum
        payload = b"".join(
            [
                _f8([obj.time_origin]),
                _f8(obj.lambdas),
                _f8(obj.v_cache),
                _f8(obj.ones_cache),
                _f8(obj.scale_v),
                _f8(obj.scale_ones),
            ]
        )
    elif isinstance(obj, AssignmentCSC):
        rtype = RECORD_CSC
        dims = (obj.num_codes, 0, obj.num_events, 0)
        group = 0
        checksum = 0
        payload = _i8(obj.col_ptr) + _i8(obj.row_idx)
    elif isinstance(obj, LightCache):
        rtype = RECORD_LIGHT
        dims = (obj.num_codes, obj.num_groups, len(obj), len(obj.codebook_checksums))
        group = 0
        checksum = 0
        payload = _i8(obj.item_ids) + _i8(obj.codes) + np.asarray(obj.codebook_checksums, dtype="<u8").tobytes()
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    if codebook_checksum_value is not None:
        checksum = codebook_checksum_value
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, rtype, *dims, group, 0, checksum, len(payload))
    return header + payload + _TRAILER.pack(zlib.crc32(payload))


def serialize_cache(obj, path, codebook_checksum_value=None) -> None:
    """Write atomically: the target is replaced only once the file is complete."""
    data = encode_cache(obj, codebook_checksum_value)
    tmp = f"{os.fspath(path)}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _expected_checksums(codebook):
    if codebook is None:
        return None
    if isinstance(codebook, Codebook):
        return [codebook_checksum(codebook)]
    return [c if isinstance(c, int) else codebook_checksum(c) for c in codebook]


def decode_cache(data: bytes, codebook=None):
    """Parse a cache record; ``codebook`` (or list, or raw checksums) enables the staleness check."""
    if len(data) < 4 and MAGIC.startswith(data):
        raise TruncatedFileError("file ends inside the magic")
    if data[:4] != MAGIC:
        raise BadMagicError("not a VQL cache file")
    if len(data) < _HEADER.size:
        raise TruncatedFileError("file ends inside the header")
    magic, version, rtype, n, dg, L, m, group, _pad, checksum, plen = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    end = _HEADER.size + plen
    if len(data) < end + _TRAILER.size:
        raise TruncatedFileError("file ends before the payload is complete")
    if len(data) > end + _TRAILER.size:
        raise CorruptPayloadError("trailing bytes after the record")
    payload = data[_HEADER.size : end]
    (crc,) = _TRAILER.unpack_from(data, end)
    if zlib.crc32(payload) != crc:
        raise CorruptPayloadError("payload checksum mismatch")
    expected = _expected_checksums(codebook)
    if rtype == RECORD_BUNDLE:
        if expected is not None and checksum not in expected:
            raise StaleChecksumError("cache was built under a different codebook")
        sizes = [1, m, n * dg, n, m * n * dg, m * n]
        if 8 * sum(sizes) != plen:
            raise CorruptPayloadError("payload length does not match dims")
        arr = np.frombuffer(payload, dtype="<f8").astype(DTYPE)
        parts, off = [], 0
        for s in sizes:
            parts.append(arr[off : off + s])
            off += s
        origin, lam, v, ones, sv, so = parts
        return CacheBundle(
            v.reshape(n, dg), ones.copy(), int(L), int(group), lam.copy(),
            sv.reshape(m, n, dg), so.reshape(m, n), float(origin[0]), int(checksum),
        )
    if rtype == RECORD_CSC:
        if expected is not None and checksum not in expected:
            raise StaleChecksumError("assignment was built under a different codebook")
        if 8 * (n + 1 + L) != plen:
            raise CorruptPayloadError("payload length does not match dims")
        arr = np.frombuffer(payload, dtype="<i8").astype(np.int64)
        csc = AssignmentCSC(int(n), int(L), arr[: n + 1].copy(), arr[n + 1 :].copy())
        try:
            csc.validate()
        except CorruptionError as exc:
            raise CorruptPayloadError(str(exc)) from exc
        return csc
    if rtype == RECORD_LIGHT:
        items, groups, nsum = L, dg, m
        if 8 * (items + items * groups + nsum) != plen:
            raise CorruptPayloadError("payload length does not match dims")
        arr = np.frombuffer(payload[: 8 * (items + items * groups)], dtype="<i8").astype(np.int64)
        sums = tuple(int(x) for x in np.frombuffer(payload[8 * (items + items * groups) :], dtype="<u8"))
        if expected is not None and list(sums) != list(expected):
            raise StaleChecksumError("light cache was built under a different codebook")
        return LightCache(arr[:items].copy(), arr[items:].reshape(items, groups), int(n), sums)
    raise RecordTypeError(f"unknown record type {rtype}")


def deserialize_cache(path, codebook=None):
    with open(path, "rb") as fh:
        data = fh.read()
    return decode_cache(data, codebook)
