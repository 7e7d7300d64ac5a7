"""Latency benchmark: exact-attention oracle versus cached VQ scoring.

The sweep has two arms sharing one reference cell: lengths vary at the first
candidate count, candidate counts vary at the first length. Each timed cell is
the scoring call only (cache construction is offline and timed separately).
Repetitions are interleaved in shuffled rounds across the cells of one
strategy, tier and arm after two discarded warm-ups per cell, so slow machine
drift affects comparable cells alike.
"""

from __future__ import annotations

import csv
import gc
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .attention import DEFAULT_LAMBDAS, topk_discarded_mass
from .data import DAY, T_END, EventSequence, generate_synthetic
from .errors import ConfigError, ParameterError
from .numkern import DTYPE, row_softmax
from .serve import TIERS, Scorer, cache_nbytes
from .trainer import TrainConfig, init_params, output_gap_and_bound

WARMUPS = 2
BENCH_COLUMNS = (
    "strategy", "L", "B", "tier", "mean_us", "std_us", "median_us",
    "cache_bytes", "max_err", "bound",
)
TOPK_COLUMNS = ("L", "k", "queries", "mean_discarded", "max_discarded")
THROUGHPUT_COLUMNS = ("tier", "threads", "users", "B", "requests", "total_s", "requests_per_s")
STRATEGIES = ("oracle", "vql")


@dataclass
class BenchConfig:
    lengths: tuple = (1000, 10000, 100000)
    candidates: tuple = (50, 100, 200, 500, 1000)
    tiers: tuple = ("heavy",)
    strategies: tuple = STRATEGIES
    d: int = 64
    codebook_size: int = 100
    groups: int = 1
    heads: int = 1
    scales: int = 0
    reps: int = 20
    seed: int = 0
    topk: int = 100
    topk_lengths: tuple = (100, 200, 500, 1000, 2000, 5000)
    topk_queries: int = 256
    threads: int = 1
    n_items: int = 2000
    n_clusters: int = 16
    errors: bool = True

    def __post_init__(self):
        if self.reps < 1:
            raise ParameterError("reps must be at least 1")
        if not self.lengths or not self.candidates:
            raise ConfigError("need at least one length and one candidate count")
        bad = set(self.tiers) - set(TIERS)
        if bad:
            raise ConfigError(f"unknown tiers {sorted(bad)}")
        bad = set(self.strategies) - set(STRATEGIES)
        if bad:
            raise ConfigError(f"unknown strategies {sorted(bad)}")
        if not 0 <= self.scales <= len(DEFAULT_LAMBDAS):
            raise ConfigError(f"scales must lie in [0, {len(DEFAULT_LAMBDAS)}]")

    def train_config(self) -> TrainConfig:
        lam = DEFAULT_LAMBDAS[: self.scales] if self.scales else None
        return TrainConfig(
            d=self.d, codebook_size=self.codebook_size, num_groups=self.groups,
            num_heads=self.heads, lambdas=lam, seed=self.seed,
        )


@dataclass
class BenchWorld:
    """Item catalog, a model with nonzero head and gate, and a scorer."""

    scorer: Scorer
    item_keys: np.ndarray
    item_values: np.ndarray
    item_cluster: np.ndarray
    cfg: TrainConfig
    rng_seed: int = 0
    _light: object = field(default=None, repr=False)

    @property
    def light(self):
        if self._light is None:
            ids = np.arange(self.item_keys.shape[0])
            self._light = self.scorer.build_light(ids, self.item_keys)
        return self._light

    def user(self, L: int, salt: int = 0) -> EventSequence:
        rng = np.random.default_rng([self.rng_seed, L, salt])
        n_cl = int(self.item_cluster.max()) + 1
        pref = rng.dirichlet(np.full(n_cl, 0.5))
        weights = pref[self.item_cluster]
        items = rng.choice(self.item_keys.shape[0], size=L, p=weights / weights.sum())
        ts = np.sort(T_END - rng.integers(0, 180 * DAY, size=L))
        return EventSequence(items, self.item_keys[items], self.item_values[items], ts, user_id=salt)

    def candidates(self, B: int, salt: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.rng_seed, B, salt, 1])
        return self.item_keys[rng.integers(self.item_keys.shape[0], size=B)]


def make_world(bc: BenchConfig) -> BenchWorld:
    cfg = bc.train_config()
    ds = generate_synthetic(
        n_users=4, avg_len=500, n_items=bc.n_items, n_clusters=bc.n_clusters,
        d_in=bc.d, samples_per_user=8, seed=bc.seed,
    )
    params = init_params(ds, cfg)
    rng = np.random.default_rng([bc.seed, 17])
    params.head_w[:] = rng.normal(size=params.head_w.shape) / np.sqrt(params.head_w.size)
    for g in range(len(params.gate_w)):
        params.gate_w[g][:] = rng.normal(scale=0.5, size=params.gate_w[g].shape)
    return BenchWorld(Scorer(params, cfg), ds.item_keys, ds.item_values, ds.item_cluster, cfg, bc.seed)


def score_oracle(scorer: Scorer, seq: EventSequence, X, t_q) -> np.ndarray:
    """Exact attention straight from raw event features: no cache, no quantizer."""
    p, cfg, gv = scorer.params, scorer.cfg, scorer.gvq
    dg = gv.group_dim
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    K = scorer.project_keys(seq.key_feats)
    V = scorer.project_values(seq.value_feats)
    q = X @ p.W_q
    Q = [q[:, h * dg : (h + 1) * dg] / np.sqrt(dg) for h in range(gv.num_heads)]
    gaps = float(t_q) - seq.timestamps.astype(DTYPE)
    outs = []
    for h in range(gv.num_heads):
        g = gv.head_to_group[h]
        sl = gv.group_slice(g)
        s = Q[h] @ K[:, sl].T
        if cfg.num_scales:
            gin = np.concatenate([Q[k] for k in gv.heads_of(g)], axis=1)
            theta = row_softmax(gin @ p.gate_w[g].T + p.gate_b[g])
            s = s + np.log(theta @ np.exp(-np.outer(cfg.lambdas, gaps)))
        outs.append(row_softmax(s) @ V[:, sl])
    return expit(np.concatenate(outs + [X], axis=1) @ p.head_w + p.head_b)


def _timed(fn) -> int:
    t0 = time.perf_counter_ns()
    fn()
    return time.perf_counter_ns() - t0


def measure_interleaved(cells: list, reps: int, warmups: int = WARMUPS, seed: int = 0) -> list:
    """Time every zero-argument callable ``reps`` times, round-robin.

    The order inside each round is reshuffled (seeded) so no cell always
    follows the same neighbour. Returns one array of nanosecond samples per
    cell.
    """
    rng = np.random.default_rng(seed)
    for fn in cells:
        for _ in range(warmups):
            fn()
    samples = [np.empty(reps, dtype=np.int64) for _ in cells]
    gc_was = gc.isenabled()
    gc.disable()
    try:
        for r in range(reps):
            for k in rng.permutation(len(cells)):
                samples[k][r] = _timed(cells[k])
    finally:
        if gc_was:
            gc.enable()
    return samples


def _grid(bc: BenchConfig) -> list:
    """``(L, B, arm)`` cells: the L arm at the first candidate count, then the B arm."""
    B0, L0 = bc.candidates[0], bc.lengths[0]
    cells = [(L, B0, "L") for L in dict.fromkeys(bc.lengths)]
    cells += [(L0, B, "B") for B in dict.fromkeys(bc.candidates) if B != B0]
    return cells


def _tier_cache(world: BenchWorld, tier: str, seq):
    s = world.scorer
    if tier == "heavy":
        return s.build_heavy(seq)
    if tier == "medium":
        return s.build_medium(seq)
    return world.light


def run_bench(bc: BenchConfig, world: BenchWorld = None, log=None) -> list:
    """The latency sweep as a list of row dicts in :data:`BENCH_COLUMNS` order."""
    world = make_world(bc) if world is None else world
    users, caches, build_us = {}, {}, {}
    specs = []
    for L, B, arm in _grid(bc):
        if L not in users:
            users[L] = world.user(L)
        seq = users[L]
        X = world.candidates(B)
        t_q = float(seq.timestamps.max()) + 60.0
        if "oracle" in bc.strategies:
            specs.append(("oracle", L, B, "none", arm, lambda seq=seq, X=X, t_q=t_q: score_oracle(world.scorer, seq, X, t_q)))
        if "vql" in bc.strategies:
            for tier in bc.tiers:
                key = (tier, L)
                if key not in caches:
                    t0 = time.perf_counter_ns()
                    caches[key] = _tier_cache(world, tier, seq)
                    build_us[key] = (time.perf_counter_ns() - t0) / 1e3
                cache = caches[key]
                specs.append((
                    "vql", L, B, tier, arm,
                    lambda tier=tier, cache=cache, seq=seq, X=X, t_q=t_q: world.scorer.score(tier, cache, seq, X, t_q),
                ))
    if log:
        log(f"timing {len(specs)} cells x {bc.reps} reps")
    # interleave only within one (strategy, tier, arm) group: an oracle call
    # streams the whole history through the CPU caches, and a large-B call
    # evicts the codebook, either of which would slow down the next cell
    samples = [None] * len(specs)
    for group in dict.fromkeys(s[:1] + s[3:5] for s in specs):
        members = [k for k, s in enumerate(specs) if s[:1] + s[3:5] == group]
        for k, ns in zip(members, measure_interleaved([specs[k][-1] for k in members], bc.reps, seed=bc.seed)):
            samples[k] = ns
    rows = []
    err_cache = {}
    for (strategy, L, B, tier, _, _), ns in zip(specs, samples):
        us = ns / 1e3
        seq = users[L]
        if strategy == "oracle":
            nbytes = int(seq.key_feats.nbytes + seq.value_feats.nbytes + 8 * len(seq))
            err, bound = 0.0, 0.0
        else:
            nbytes = cache_nbytes(tier, caches[(tier, L)])
            if bc.errors:
                if (L, B) not in err_cache:
                    X = world.candidates(B)
                    t_q = float(seq.timestamps.max()) + 60.0
                    gap, bnd, _ = output_gap_and_bound(seq, X, t_q, world.scorer.params, world.cfg)
                    err_cache[(L, B)] = (gap, bnd)
                err, bound = err_cache[(L, B)]
            else:
                err, bound = float("nan"), float("nan")
        rows.append({
            "strategy": strategy, "L": L, "B": B, "tier": tier,
            "mean_us": float(us.mean()), "std_us": float(us.std(ddof=1)) if us.size > 1 else 0.0,
            "median_us": float(np.median(us)), "cache_bytes": nbytes,
            "max_err": err, "bound": bound,
        })
    return rows


def run_topk(bc: BenchConfig, world: BenchWorld = None) -> list:
    """Fraction of exact softmax mass outside the top ``k`` events, per length.

    Histories are nested prefixes of one long sequence and the query set is
    fixed, so lengths differ only by the events they add.
    """
    world = make_world(bc) if world is None else world
    s = world.scorer
    dg = s.gvq.group_dim
    longest = world.user(max(bc.topk_lengths), salt=99)
    K = s.project_keys(longest.key_feats)[:, s.gvq.group_slice(0)]
    X = world.candidates(bc.topk_queries, salt=99)
    Q = (X @ s.params.W_q)[:, :dg] / np.sqrt(dg)
    rows = []
    for L in bc.topk_lengths:
        frac = topk_discarded_mass(Q @ K[:L].T, bc.topk)
        rows.append({
            "L": L, "k": bc.topk, "queries": Q.shape[0],
            "mean_discarded": float(frac.mean()), "max_discarded": float(frac.max()),
        })
    return rows


def run_throughput(bc: BenchConfig, world: BenchWorld = None, n_users: int = 32) -> list:
    """Requests per second with ``bc.threads`` workers sharing read-only caches."""
    world = make_world(bc) if world is None else world
    L, B = bc.lengths[0], bc.candidates[0]
    seqs = [world.user(L, salt=u) for u in range(n_users)]
    X = world.candidates(B)
    rows = []
    for tier in bc.tiers:
        caches = [_tier_cache(world, tier, seq) for seq in seqs]
        tq = [float(seq.timestamps.max()) + 60.0 for seq in seqs]

        def one(u):
            return world.scorer.score(tier, caches[u], seqs[u], X, tq[u])

        requests = n_users * bc.reps
        order = [u for _ in range(bc.reps) for u in range(n_users)]
        with ThreadPoolExecutor(max_workers=bc.threads) as pool:
            list(pool.map(one, range(n_users)))  # warm-up
            t0 = time.perf_counter_ns()
            list(pool.map(one, order))
            total = (time.perf_counter_ns() - t0) / 1e9
        rows.append({
            "tier": tier, "threads": bc.threads, "users": n_users, "B": B,
            "requests": requests, "total_s": total, "requests_per_s": requests / total,
        })
    return rows


def threads_from_env(default: int = 1) -> int:
    raw = os.environ.get("VQL_THREADS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"VQL_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("VQL_THREADS must be at least 1")
    return n


def write_csv(rows: list, columns, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def latency_summary(rows: list, tier: str = "heavy", stat: str = "median_us") -> dict:
    """Spread of the L arm, oracle growth, and the B-arm ratio from a sweep."""
    vql = [r for r in rows if r["strategy"] == "vql" and r["tier"] == tier]
    orc = [r for r in rows if r["strategy"] == "oracle"]
    out = {}
    if vql:
        B0 = min(r["B"] for r in vql if r["L"] == max(x["L"] for x in vql))
        L0 = min(r["L"] for r in vql)
        l_arm = [r[stat] for r in vql if r["B"] == B0]
        b_arm = sorted((r["B"], r[stat]) for r in vql if r["L"] == L0)
        out["l_spread"] = (max(l_arm) - min(l_arm)) / min(l_arm)
        out["b_ratio"] = b_arm[-1][1] / b_arm[0][1]
    if orc:
        Ls = sorted({r["L"] for r in orc})
        B0 = min(r["B"] for r in orc if r["L"] == Ls[-1])
        by_l = {r["L"]: r[stat] for r in orc if r["B"] == B0}
        out["oracle_growth"] = by_l[Ls[-1]] / by_l[Ls[0]]
    return out
