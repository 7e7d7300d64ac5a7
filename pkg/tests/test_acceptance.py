"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test records a PASS/FAIL line that is printed in the terminal summary,
then asserts. Runtime limits are checked alongside the numeric conditions.
"""

import time

import numpy as np

from vql.attention import (
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
from vql.bench import BenchConfig, latency_summary, make_world, run_bench, run_topk
from vql.cache import (
    AssignmentCSC,
    CacheBundle,
    LightCache,
    build_assignment_csc,
    build_heavy_cache,
    codebook_checksum,
    decode_cache,
    encode_cache,
)
from vql.data import generate_synthetic
from vql.errors import (
    BadMagicError,
    CorruptPayloadError,
    StaleChecksumError,
    TruncatedFileError,
    VersionMismatchError,
)
from vql.serve import TIERS, Scorer
from vql.trainer import TrainConfig, finite_diff_check, init_params, train
from vql.vq import Assignment, Codebook, assign_nearest, quantize

EPS = np.finfo(np.float64).eps


def rel_err(a, b) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


def test_criterion_01_train_infer_equivalence(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    lengths = (10, 100, 1000, 10000)
    worst = dict.fromkeys(lengths, 0.0)
    for case in range(1000):
        L = lengths[case % 4]
        N = int(rng.choice([4, 16, 64]))
        d = int(rng.choice([8, 64]))
        keys = rng.normal(size=(L, d))
        inputs = AttentionInputs.from_raw(rng.normal(size=(4, d)), keys, 2.0 * rng.normal(size=(L, d)))
        cb = Codebook(rng.normal(size=(N, d)))
        train_out, _, a = train_attention(inputs, cb)
        b = build_heavy_cache(build_assignment_csc(a, N), inputs.values)
        worst[L] = max(worst[L], rel_err(infer_attention(inputs.queries, cb, b.v_cache, b.ones_cache), train_out))
    elapsed = time.perf_counter() - t0
    # "does not increase" is judged above the float64 noise floor
    floor = 100 * EPS
    monotone = all(worst[b] <= max(worst[a], floor) for a, b in zip(lengths, lengths[1:]))
    ok = max(worst.values()) <= 1e-9 and monotone and elapsed < 120
    detail = ", ".join(f"L={L}: {w:.2e}" for L, w in worst.items()) + f"; {elapsed:.1f} s"
    acceptance_report(1, "train/infer equivalence", ok, detail)
    assert ok, detail


def test_criterion_02_one_hot_extraction(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    failures = 0
    for _ in range(10_000):
        m, N, L = (int(x) for x in rng.integers(1, 16, size=3))
        U = rng.normal(scale=4.0, size=(m, N))
        W = np.zeros((N, L))
        W[rng.integers(N, size=L), np.arange(L)] = 1.0
        failures += not one_hot_extraction_check(U, W)
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and elapsed < 10
    acceptance_report(2, "one-hot extraction exactness", ok, f"{failures} mismatches in 10000 pairs; {elapsed:.1f} s")
    assert ok


def test_criterion_03_error_bounds(acceptance_report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    weight_viol = output_viol = 0
    tightest = 0.0
    for _ in range(1000):
        L, N, d = int(rng.integers(2, 5001)), int(rng.integers(1, 40)), int(rng.integers(1, 32))
        c = float(rng.uniform(0.5, 5.0))
        inputs = AttentionInputs.from_raw(
            rng.normal(scale=2.0, size=(1, d)), rng.normal(size=(L, d)), 3.0 * rng.normal(size=(L, d)), c
        )
        rep = error_bound_report(inputs, Codebook(rng.normal(size=(N, d))), check=False)
        weight_viol += rep.weight_l1_err > rep.logit_inf_err
        output_viol += rep.measured_output_err > rep.bound
        if rep.bound > 0:
            tightest = max(tightest, rep.measured_output_err / rep.bound)
    elapsed = time.perf_counter() - t0
    ok = weight_viol == 0 and output_viol == 0 and elapsed < 60
    detail = f"{weight_viol} weight / {output_viol} output violations; tightest ratio {tightest:.3f}; {elapsed:.1f} s"
    acceptance_report(3, "error bounds", ok, detail)
    assert ok


def test_criterion_04_gvq_budget(acceptance_report):
    d, N, L = 64, 100, 300
    rng = np.random.default_rng(104)
    counts = {}
    for G in (1, 2, 4, 8, 16):
        gv = GvqConfig(d, G, G)
        V = rng.normal(size=(L, d))
        caches = []
        for g in range(G):
            sl = gv.group_slice(g)
            K = rng.normal(size=(L, gv.group_dim))
            a = assign_nearest(K, Codebook(rng.normal(size=(N, gv.group_dim))))
            caches.append(build_heavy_cache(build_assignment_csc(a, N), V[:, sl]).plain_pair())
        counts[G] = gvq_cache_float_counts(caches)["value"]
    ok = all(v == 6400 for v in counts.values())
    acceptance_report(4, "GVQ cache budget", ok, ", ".join(f"G={g}: {v}" for g, v in counts.items()))
    assert ok


def test_criterion_05_temporal(acceptance_report):
    rng = np.random.default_rng(105)
    worst = worst_shift = 0.0
    for case in range(500):
        L = 5000 if case < 5 else int(rng.integers(1, 5001))
        N, d = int(rng.integers(1, 32)), int(rng.integers(1, 16))
        keys, V = rng.normal(size=(L, d)), rng.normal(size=(L, d))
        cb = Codebook(rng.normal(size=(N, d)))
        a = assign_nearest(keys, cb)
        t = np.sort(1_700_000_000 - rng.integers(0, 365 * 86400, size=L)).astype(float)
        t_q = float(t.max() + rng.integers(0, 7 * 86400))
        lam = rng.uniform(1e-8, 1e-5, size=1)
        q = rng.normal(size=(3, d))
        b = build_heavy_cache(build_assignment_csc(a, N), V, t, lam)
        cfg = TemporalConfig(lam, np.zeros((1, d)), time_origin=b.time_origin)
        fast = temporal_infer(q, t_q, cb, b.scale_pairs(), cfg)
        worst = max(worst, rel_err(fast, temporal_oracle(q, t_q, quantize(keys, cb, a), V, t, cfg)))
        shift = float(rng.integers(-10**8, 10**8))
        b2 = build_heavy_cache(build_assignment_csc(a, N), V, t + shift, lam)
        cfg2 = TemporalConfig(lam, np.zeros((1, d)), time_origin=b2.time_origin)
        moved = temporal_infer(q, t_q + shift, cb, b2.scale_pairs(), cfg2)
        worst_shift = max(worst_shift, float(np.abs(moved - fast).max()))
    ok = worst <= 1e-9 and worst_shift < 1e-12
    acceptance_report(5, "temporal correctness", ok, f"worst vs oracle {worst:.2e}; worst rebasing effect {worst_shift:.2e}")
    assert ok


def test_criterion_06_tier_equivalence(acceptance_report):
    ds = generate_synthetic(seed=106, n_users=100, avg_len=60, n_clusters=6, samples_per_user=1, d_in=8, n_items=300)
    cfg = TrainConfig(d=8, codebook_size=16, num_groups=2, num_heads=4, lambdas=(1e-6, 1e-5, 1e-4))
    params = init_params(ds, cfg)
    rng = np.random.default_rng(106)
    params.head_w[:] = rng.normal(size=params.head_w.shape)
    for g in range(len(params.gate_w)):
        params.gate_w[g][:] = rng.normal(size=params.gate_w[g].shape)
    scorer = Scorer(params, cfg)
    light = scorer.build_light(np.arange(ds.item_keys.shape[0]), ds.item_keys)
    worst = 0.0
    for seq in ds.users:
        X = ds.item_keys[rng.integers(ds.item_keys.shape[0], size=20)]
        t_q = float(seq.timestamps.max()) + float(rng.integers(1, 86400))
        caches = {"light": light, "medium": scorer.build_medium(seq), "heavy": scorer.build_heavy(seq)}
        s = {t: scorer.score(t, caches[t], seq, X, t_q) for t in TIERS}
        worst = max(worst, float(np.abs(s["light"] - s["heavy"]).max()), float(np.abs(s["medium"] - s["heavy"]).max()))
    ok = worst <= 1e-9
    acceptance_report(6, "caching-tier equivalence", ok, f"max score difference over 100 users {worst:.2e}")
    assert ok


def test_criterion_07_length_free_latency(acceptance_report):
    t0 = time.perf_counter()
    # 60 medians-of-reps keep the L-arm spread near 2%; 20 reps sit at 5-8%
    bc = BenchConfig(errors=False, reps=60)
    rows = run_bench(bc, make_world(bc))
    s = latency_summary(rows, "heavy")
    elapsed = time.perf_counter() - t0
    l_ok = s["l_spread"] < 0.10
    o_ok = s["oracle_growth"] >= 10.0
    b_ok = s["b_ratio"] < 2.0
    ok = l_ok and o_ok and b_ok and elapsed < 600
    detail = (
        f"heavy spread over L {100 * s['l_spread']:.1f}% [{'ok' if l_ok else 'fail'}], "
        f"oracle growth {s['oracle_growth']:.0f}x [{'ok' if o_ok else 'fail'}], "
        f"heavy B=50->1000 ratio {s['b_ratio']:.1f}x [{'ok' if b_ok else 'fail'}]; {elapsed:.0f} s"
    )
    acceptance_report(7, "length-free latency", ok, detail)
    assert ok, detail


def test_criterion_08_topk_discarded_mass(acceptance_report):
    bc = BenchConfig(topk=100, topk_lengths=(100, 200, 500, 1000, 2000, 5000))
    rows = run_topk(bc, make_world(bc))
    fr = [r["mean_discarded"] for r in rows]
    ok = all(b >= a for a, b in zip(fr, fr[1:]))
    acceptance_report(8, "top-k discarded mass", ok, "mean discarded " + ", ".join(f"{x:.3f}" for x in fr))
    assert ok


def test_criterion_09_training_sanity(acceptance_report):
    t0 = time.perf_counter()
    ds = generate_synthetic(n_users=30, avg_len=150, n_clusters=8, samples_per_user=20, d_in=16,
                            noise=0.5, n_items=400, seed=0)
    cfg = TrainConfig(d=16, codebook_size=8, epochs=20, lr=0.1, codebook_lr=0.1, alpha=4.0, seed=0)
    params, hist = train(ds, cfg)
    e0, e1 = hist[0]["max_key_err"], hist[-1]["max_key_err"]
    drop = 1.0 - e1 / e0
    loss0, loss1 = hist[0]["joint_loss"], hist[-1]["joint_loss"]
    fd = finite_diff_check(params, ds, np.arange(40), cfg, eps=1e-5, max_entries=60)
    elapsed = time.perf_counter() - t0
    ok = drop >= 0.5 and loss1 < loss0 and fd.max_rel_error <= 1e-4 and elapsed < 300
    detail = (
        f"max key error {e0:.3f} -> {e1:.3f} ({100 * drop:.0f}% drop), joint loss {loss0:.4f} -> {loss1:.4f}, "
        f"finite-difference max rel error {fd.max_rel_error:.1e} over {fd.checked} entries; {elapsed:.0f} s"
    )
    acceptance_report(9, "training sanity", ok, detail)
    assert ok, detail


def _same_record(a, b) -> bool:
    fields = {
        CacheBundle: ("v_cache", "ones_cache", "lambdas", "scale_v", "scale_ones"),
        AssignmentCSC: ("col_ptr", "row_idx"),
        LightCache: ("item_ids", "codes"),
    }[type(a)]
    return type(a) is type(b) and all(
        np.asarray(getattr(a, f)).tobytes() == np.asarray(getattr(b, f)).tobytes() for f in fields
    )


def test_criterion_10_serialization(acceptance_report):
    rng = np.random.default_rng(110)
    mismatches = 0
    for case in range(1000):
        N, dg, L = int(rng.integers(1, 20)), int(rng.integers(1, 9)), int(rng.integers(1, 80))
        kind = case % 3
        if kind == 0:
            M = int(rng.integers(0, 4))
            obj = CacheBundle(rng.normal(size=(N, dg)), rng.integers(0, L, size=N).astype(float), L, 0,
                              rng.uniform(0, 1e-5, M), rng.normal(size=(M, N, dg)), rng.uniform(size=(M, N)),
                              float(rng.integers(0, 2**31)), int(rng.integers(0, 2**63)))
        elif kind == 1:
            obj = build_assignment_csc(Assignment(rng.integers(N, size=L), N), N)
        else:
            obj = LightCache(rng.choice(10**6, L, replace=False), rng.integers(N, size=(L, 2)), N, (1, 2))
        mismatches += not _same_record(decode_cache(encode_cache(obj)), obj)

    cb = Codebook(rng.normal(size=(8, 4)))
    blob = encode_cache(build_heavy_cache(build_assignment_csc(Assignment(rng.integers(8, size=30), 8), 8),
                                          rng.normal(size=(30, 4)), codebook_checksum=codebook_checksum(cb)))
    flipped = bytearray(blob)
    flipped[80] ^= 0x10
    bad_version = bytearray(blob)
    bad_version[4] = 7
    cases = [
        ("truncated", blob[:-5], TruncatedFileError, 33),
        ("bad magic", b"XXXX" + blob[4:], BadMagicError, 31),
        ("bad version", bytes(bad_version), VersionMismatchError, 32),
        ("flipped payload bit", bytes(flipped), CorruptPayloadError, 35),
        ("stale codebook", blob, StaleChecksumError, 34),
    ]
    stale_cb = Codebook(cb.codewords * (1 + 1e-9))
    rejected = []
    for name, data, exc, code in cases:
        try:
            decode_cache(data, stale_cb if exc is StaleChecksumError else cb)
            rejected.append((name, False))
        except exc as err:
            rejected.append((name, err.code == code))
    ok = mismatches == 0 and all(r for _, r in rejected)
    detail = f"{1000 - mismatches}/1000 bit-exact round trips; " + ", ".join(
        f"{n} {'rejected' if r else 'NOT rejected'}" for n, r in rejected
    )
    acceptance_report(10, "serialization", ok, detail)
    assert ok
