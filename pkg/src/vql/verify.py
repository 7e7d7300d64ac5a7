"""Seeded randomized property suites behind ``vql verify``.

Every suite draws its own instances from ``seed``, compares an implementation
against an independent oracle and returns a :class:`SuiteResult`. Failures
carry a counterexample; the assignment suite shrinks its counterexample to a
single key and the fewest codewords that still reproduce the failure.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionInputs,
    GvqConfig,
    TemporalConfig,
    error_bound_report,
    gvq_cache_float_counts,
    infer_attention,
    one_hot_extraction_check,
    temporal_infer,
    temporal_oracle,
    train_attention,
)
from .cache import (
    CacheBundle,
    LightCache,
    build_assignment_csc,
    build_heavy_cache,
    codebook_checksum,
    decode_cache,
    deserialize_cache,
    encode_cache,
    serialize_cache,
    update_heavy_cache_incremental,
)
from .errors import (
    BadMagicError,
    CorruptPayloadError,
    StaleChecksumError,
    TruncatedFileError,
    VersionMismatchError,
)
from .numkern import DTYPE
from .vq import Assignment, Codebook, assign_nearest, quantize

FAULTS = ("tie-rule",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str = ""
    counterexample: dict = field(default=None)


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def _instance(rng, L, N, d, B=4, c=4.0):
    keys = rng.normal(size=(L, d))
    inputs = AttentionInputs.from_raw(rng.normal(size=(B, d)), keys, rng.normal(size=(L, d)) * 2.0, c)
    cb = Codebook(keys[rng.choice(L, size=min(N, L), replace=False)] + 0.1 * rng.normal(size=(min(N, L), d)))
    return inputs, cb


def _plain_caches(inputs, cb):
    a = assign_nearest(inputs.keys, cb)
    b = build_heavy_cache(build_assignment_csc(a, cb.size), inputs.values)
    return a, b


# ---------------------------------------------------------------- suites


def suite_one_hot(seed: int, n: int = 2000) -> SuiteResult:
    rng = np.random.default_rng([seed, 1])
    for case in range(n):
        m, L, N = (int(x) for x in rng.integers(1, 12, size=3))
        U = rng.normal(scale=3.0, size=(m, N))
        W = np.zeros((N, L))
        W[rng.integers(N, size=L), np.arange(L)] = 1.0
        if not one_hot_extraction_check(U, W):
            return SuiteResult("one_hot", False, case + 1, "exp(U)W != exp(UW)", {"U": U.tolist(), "W": W.tolist()})
    return SuiteResult("one_hot", True, n, "exact equality on every pair")


def suite_equivalence(seed: int, n: int = 200, tol: float = 1e-9) -> SuiteResult:
    rng = np.random.default_rng([seed, 2])
    worst = 0.0
    for case in range(n):
        L = int(rng.choice([10, 100, 1000]))
        N = int(rng.choice([4, 16, 64]))
        d = int(rng.choice([8, 64]))
        inputs, cb = _instance(rng, L, N, d)
        train_out, _, _ = train_attention(inputs, cb)
        _, b = _plain_caches(inputs, cb)
        err = _rel(infer_attention(inputs.queries, cb, b.v_cache, b.ones_cache), train_out)
        worst = max(worst, err)
        if err > tol:
            return SuiteResult("equivalence", False, case + 1, f"relative error {err:.3e}",
                               {"L": L, "N": N, "d": d, "rel_err": err})
    return SuiteResult("equivalence", True, n, f"worst relative error {worst:.3e}")


def suite_bounds(seed: int, n: int = 300) -> SuiteResult:
    rng = np.random.default_rng([seed, 3])
    for case in range(n):
        inputs, cb = _instance(rng, int(rng.integers(2, 300)), int(rng.integers(1, 32)), int(rng.integers(1, 16)))
        rep = error_bound_report(inputs, cb, check=False)
        if not rep.holds:
            return SuiteResult("bounds", False, case + 1, "bound violated", {"report": repr(rep)})
    return SuiteResult("bounds", True, n, "no violations")


def suite_conservation(seed: int, n: int = 100) -> SuiteResult:
    rng = np.random.default_rng([seed, 4])
    for case in range(n):
        L, N, d = int(rng.integers(1, 400)), int(rng.integers(1, 20)), int(rng.integers(1, 8))
        idx = rng.integers(N, size=L)
        V = rng.normal(size=(L, d))
        b = build_heavy_cache(build_assignment_csc(Assignment(idx, N), N), V)
        dense = Assignment(idx, N).one_hot()
        if b.ones_cache.sum() != L:
            return SuiteResult("conservation", False, case + 1, "ones cache does not sum to L", {"L": L})
        if np.abs(b.v_cache - dense.T @ V).max() > 1e-12:
            return SuiteResult("conservation", False, case + 1, "v cache differs from dense product", {"L": L})
        split = int(rng.integers(0, L + 1))
        parts = [
            build_heavy_cache(build_assignment_csc(Assignment(idx[s], N), N), V[s])
            for s in (slice(0, split), slice(split, L))
        ]
        if np.abs(parts[0].v_cache + parts[1].v_cache - b.v_cache).max() > 1e-12:
            return SuiteResult("conservation", False, case + 1, "linearity over concatenation fails", {"L": L})
        inc = parts[0]
        for i in range(split, L):
            inc = update_heavy_cache_incremental(inc, int(idx[i]), V[i])
        if np.abs(inc.v_cache - b.v_cache).max() > 1e-12 or inc.event_count != L:
            return SuiteResult("conservation", False, case + 1, "incremental append differs from rebuild", {"L": L})
    return SuiteResult("conservation", True, n, "conservation, linearity and append agree")


def _random_object(rng):
    kind = int(rng.integers(3))
    N, dg = int(rng.integers(1, 12)), int(rng.integers(1, 6))
    L = int(rng.integers(1, 50))
    if kind == 0:
        M = int(rng.integers(0, 3))
        lam = rng.uniform(0, 1e-5, size=M)
        return CacheBundle(
            rng.normal(size=(N, dg)), rng.integers(0, 5, size=N).astype(DTYPE), L, int(rng.integers(4)),
            lam, rng.normal(size=(M, N, dg)), rng.uniform(size=(M, N)), float(rng.integers(1 << 30)),
        )
    if kind == 1:
        return build_assignment_csc(Assignment(rng.integers(N, size=L), N), N)
    ids = rng.choice(10_000, size=L, replace=False)
    return LightCache(ids, rng.integers(N, size=(L, int(rng.integers(1, 3)))), N)


def _same(a, b) -> bool:
    if type(a) is not type(b):
        return False
    for k, va in vars(a).items():
        vb = getattr(b, k)
        if isinstance(va, np.ndarray):
            if va.dtype != vb.dtype or va.shape != vb.shape or va.tobytes() != vb.tobytes():
                return False
        elif va != vb:
            return False
    return True


def suite_serialization(seed: int, n: int = 300) -> SuiteResult:
    rng = np.random.default_rng([seed, 5])
    for case in range(n):
        obj = _random_object(rng)
        back = decode_cache(encode_cache(obj))
        if not _same(obj, back):
            return SuiteResult("serialization", False, case + 1, f"round trip changed a {type(obj).__name__}")
    cb_a = Codebook(rng.normal(size=(4, 3)))
    cb_b = Codebook(cb_a.codewords + 1e-9)
    bundle = build_heavy_cache(build_assignment_csc(Assignment(rng.integers(4, size=9), 4), 4), rng.normal(size=(9, 3)),
                               codebook_checksum=codebook_checksum(cb_a))
    blob = encode_cache(bundle)
    flipped = bytearray(blob)
    flipped[-9] ^= 0x10
    bad_version = bytearray(blob)
    bad_version[4] ^= 0xFF
    checks = [
        ("truncated", blob[: len(blob) // 2], TruncatedFileError, cb_a),
        ("bad magic", b"XXXX" + blob[4:], BadMagicError, cb_a),
        ("bad version", bytes(bad_version), VersionMismatchError, cb_a),
        ("flipped payload bit", bytes(flipped), CorruptPayloadError, cb_a),
        ("stale codebook", blob, StaleChecksumError, cb_b),
    ]
    for label, data, exc, cb in checks:
        try:
            decode_cache(data, cb)
        except exc:
            continue
        except Exception as other:  # noqa: BLE001 - report the wrong class
            return SuiteResult("serialization", False, n, f"{label}: raised {type(other).__name__}")
        return SuiteResult("serialization", False, n, f"{label}: accepted")
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "b.vqlc")
        serialize_cache(bundle, path)
        if not _same(bundle, deserialize_cache(path, cb_a)):
            return SuiteResult("serialization", False, n, "file round trip changed the bundle")
    return SuiteResult("serialization", True, n + len(checks) + 1, "bit-exact; corrupt and stale files rejected")


def _brute_assign(keys, codewords) -> np.ndarray:
    out = np.empty(len(keys), dtype=np.int64)
    for i, k in enumerate(keys):
        best, best_j = None, -1
        for j, c in enumerate(codewords):
            dist = sum((float(a) - float(b)) ** 2 for a, b in zip(k, c))
            if best is None or dist < best:
                best, best_j = dist, j
        out[i] = best_j
    return out


def _assign_highest_tie(keys, codebook: Codebook) -> Assignment:
    """Deliberately broken tie rule used for fault injection."""
    from .vq import squared_distances

    dist = squared_distances(np.asarray(keys, dtype=DTYPE), codebook.codewords)
    rev = np.argmin(dist[:, ::-1], axis=1)
    return Assignment(codebook.size - 1 - rev, codebook.size)


def _shrink(key, codewords, assign_fn):
    """Fewest codewords (greedy removal) on which ``assign_fn`` still disagrees with brute force."""

    def fails(cw):
        got = assign_fn(key[None, :], Codebook(cw)).indices[0]
        return got != _brute_assign(key[None, :], cw)[0]

    cw = codewords
    changed = True
    while changed and cw.shape[0] > 1:
        changed = False
        for j in range(cw.shape[0]):
            trial = np.delete(cw, j, axis=0)
            if trial.shape[0] and fails(trial):
                cw, changed = trial, True
                break
    got = int(assign_fn(key[None, :], Codebook(cw)).indices[0])
    return {"key": key.tolist(), "codewords": cw.tolist(), "expected": int(_brute_assign(key[None, :], cw)[0]), "got": got}


def suite_assignment(seed: int, n: int = 200, assign_fn=assign_nearest) -> SuiteResult:
    """Nearest-codeword rule with ties to the lowest index, on integer grids full of ties."""
    rng = np.random.default_rng([seed, 6])
    for case in range(n):
        d, N, L = int(rng.integers(1, 4)), int(rng.integers(2, 8)), int(rng.integers(1, 20))
        cw = rng.integers(-2, 3, size=(N, d)).astype(DTYPE)
        if rng.random() < 0.5:
            cw[rng.integers(N)] = cw[rng.integers(N)]
        keys = rng.integers(-2, 3, size=(L, d)).astype(DTYPE)
        got = assign_fn(keys, Codebook(cw)).indices
        want = _brute_assign(keys, cw)
        bad = np.flatnonzero(got != want)
        if bad.size:
            cex = _shrink(keys[bad[0]], cw, assign_fn)
            return SuiteResult("assignment", False, case + 1, "tie rule violated (expected lowest index)", cex)
    return SuiteResult("assignment", True, n, "matches brute force incl. ties")


def suite_temporal(seed: int, n: int = 100, tol: float = 1e-9) -> SuiteResult:
    rng = np.random.default_rng([seed, 7])
    worst, worst_shift = 0.0, 0.0
    for case in range(n):
        L, N, d = int(rng.integers(1, 500)), int(rng.integers(1, 16)), int(rng.integers(1, 8))
        M = int(rng.integers(1, 4))
        keys = rng.normal(size=(L, d))
        V = rng.normal(size=(L, d))
        cb = Codebook(rng.normal(size=(N, d)))
        a = assign_nearest(keys, cb)
        t = np.sort(1_700_000_000 - rng.integers(0, 90 * 86400, size=L)).astype(DTYPE)
        t_q = float(t.max() + rng.integers(0, 86400))
        lam = rng.uniform(0, 3e-6, size=M)
        q = rng.normal(size=(3, d))
        gw = rng.normal(size=(M, d))
        b = build_heavy_cache(build_assignment_csc(a, N), V, t, lam)
        cfg = TemporalConfig(lam, gw, time_origin=b.time_origin)
        fast = temporal_infer(q, t_q, cb, b.scale_pairs(), cfg)
        slow = temporal_oracle(q, t_q, quantize(keys, cb, a), V, t, cfg)
        err = _rel(fast, slow)
        worst = max(worst, err)
        if err > tol:
            return SuiteResult("temporal", False, case + 1, f"cached vs per-event {err:.3e}", {"L": L, "M": M})
        shift = float(rng.integers(-10**6, 10**6))
        b2 = build_heavy_cache(build_assignment_csc(a, N), V, t + shift, lam)
        cfg2 = TemporalConfig(lam, gw, time_origin=b2.time_origin)
        moved = np.abs(temporal_infer(q, t_q + shift, cb, b2.scale_pairs(), cfg2) - fast).max()
        worst_shift = max(worst_shift, float(moved))
        if moved >= 1e-12:
            return SuiteResult("temporal", False, case + 1, f"time shift moved output by {moved:.3e}", {"shift": shift})
    return SuiteResult("temporal", True, n, f"worst {worst:.2e}; worst shift effect {worst_shift:.2e}")


def suite_gvq(seed: int, n: int = 0) -> SuiteResult:
    rng = np.random.default_rng([seed, 8])
    d, N, L = 64, 100, 500
    checked = 0
    for G in (1, 2, 4, 8, 16):
        gv = GvqConfig(d, G, G)
        V = rng.normal(size=(L, d))
        caches = []
        for g in range(G):
            idx = rng.integers(N, size=L)
            b = build_heavy_cache(build_assignment_csc(Assignment(idx, N), N), V[:, gv.group_slice(g)])
            caches.append(b.plain_pair())
        counts = gvq_cache_float_counts(caches)
        checked += 1
        if counts["value"] != N * d:
            return SuiteResult("gvq", False, checked, f"G={G}: {counts['value']} value floats", {"G": G})
    return SuiteResult("gvq", True, checked, f"value cache = {N * d} floats for every G")


SUITES = {
    "one_hot": suite_one_hot,
    "equivalence": suite_equivalence,
    "bounds": suite_bounds,
    "conservation": suite_conservation,
    "serialization": suite_serialization,
    "assignment": suite_assignment,
    "temporal": suite_temporal,
    "gvq": suite_gvq,
}


def run_all(seed: int = 0, fault: str = None, only=None) -> list:
    """Run every suite (or the names in ``only``); ``fault`` injects a known bug."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; expected one of {FAULTS}")
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        if name == "assignment" and fault == "tie-rule":
            results.append(fn(seed, assign_fn=_assign_highest_tie))
        else:
            results.append(fn(seed))
    return results
