"""User histories, the planted-cluster synthetic generator and event-log I/O.

Text event log (one event per line, fixed-width, whitespace separated)::

    # vql-events v1 d_in=<d>
    <user:8d> <item:10d> <timestamp:12d> <key feats: d x %+.17e> <value feats: d x %+.17e>

Samples file::

    # vql-samples v1
    <user:8d> <item:10d> <t_query:12d> <label:1d>

Items file::

    # vql-items v1 d_in=<d>
    <item:10d> <cluster:6d> <key feats> <value feats>

The binary variant stores the same arrays in a single ``.npz``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedEventLogError, MissingInputError, ParameterError, ShapeError
from .numkern import DTYPE

KUAIRAND_AVG_LEN = 4407
T_END = 1_700_000_000
DAY = 86400


@dataclass
class EventSequence:
    item_ids: np.ndarray
    key_feats: np.ndarray
    value_feats: np.ndarray
    timestamps: np.ndarray
    user_id: int = 0

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.key_feats = np.atleast_2d(np.asarray(self.key_feats, dtype=DTYPE))
        self.value_feats = np.atleast_2d(np.asarray(self.value_feats, dtype=DTYPE))
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = self.item_ids.shape[0]
        if n < 1:
            raise ShapeError("a sequence needs at least one event")
        if not (self.key_feats.shape[0] == self.value_feats.shape[0] == self.timestamps.shape[0] == n):
            raise ShapeError("event arrays must share their length")
        if np.any(np.diff(self.timestamps) < 0):
            raise ShapeError("timestamps must be non-decreasing")

    def __len__(self):
        return self.item_ids.shape[0]

    def permuted(self, perm) -> "EventSequence":
        """Same events in another order (timestamps travel with their event)."""
        seq = object.__new__(EventSequence)
        seq.item_ids = self.item_ids[perm]
        seq.key_feats = self.key_feats[perm]
        seq.value_feats = self.value_feats[perm]
        seq.timestamps = self.timestamps[perm]
        seq.user_id = self.user_id
        return seq

    def concat(self, other: "EventSequence") -> "EventSequence":
        return EventSequence(
            np.concatenate([self.item_ids, other.item_ids]),
            np.vstack([self.key_feats, other.key_feats]),
            np.vstack([self.value_feats, other.value_feats]),
            np.concatenate([self.timestamps, other.timestamps]),
            self.user_id,
        )


@dataclass
class Dataset:
    item_keys: np.ndarray
    item_values: np.ndarray
    item_cluster: np.ndarray
    users: list
    sample_user: np.ndarray
    sample_item: np.ndarray
    sample_time: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.item_keys.shape[1]

    @property
    def num_samples(self) -> int:
        return self.labels.shape[0]

    def candidates(self, idx) -> np.ndarray:
        return self.item_keys[self.sample_item[idx]]

    def user_index(self) -> dict:
        return {u.user_id: k for k, u in enumerate(self.users)}

    def subset(self, sample_idx) -> "Dataset":
        idx = np.asarray(sample_idx)
        return Dataset(
            self.item_keys, self.item_values, self.item_cluster, self.users,
            self.sample_user[idx], self.sample_item[idx], self.sample_time[idx], self.labels[idx], dict(self.meta),
        )


@dataclass
class SyntheticConfig:
    n_users: int = 50
    avg_len: float = KUAIRAND_AVG_LEN
    len_sigma: float = 0.5
    n_clusters: int = 16
    noise: float = 0.1
    d_in: int = 16
    n_items: int = 2000
    samples_per_user: int = 20
    separation: float = 3.0
    span_days: float = 180.0
    signal: float = 2.0
    seed: int = 0


def _lengths(cfg: SyntheticConfig, rng) -> np.ndarray:
    # lognormal with the requested mean
    mu = np.log(cfg.avg_len) - 0.5 * cfg.len_sigma**2
    return np.maximum(1, np.round(rng.lognormal(mu, cfg.len_sigma, size=cfg.n_users))).astype(np.int64)


def generate_synthetic(cfg: SyntheticConfig = None, **overrides) -> Dataset:
    """Seeded planted-cluster CTR data.

    Item keys come from a Gaussian mixture with ``n_clusters`` components.
    Labels are Bernoulli draws from a planted exact-attention model over the
    cluster centers with a monthly exponential recency kernel, so the task is
    learnable by the model family trained here.
    """
    cfg = SyntheticConfig(**overrides) if cfg is None else cfg
    for name in ("n_users", "avg_len", "n_clusters", "d_in", "n_items", "samples_per_user"):
        if getattr(cfg, name) <= 0:
            raise ParameterError(f"{name} must be positive")
    if cfg.noise < 0:
        raise ParameterError("noise must be nonnegative")
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_in
    centers = rng.normal(size=(cfg.n_clusters, d)) * (cfg.separation / np.sqrt(d))
    cluster = np.arange(cfg.n_items) % cfg.n_clusters
    item_keys = centers[cluster] + cfg.noise * rng.normal(size=(cfg.n_items, d)) / np.sqrt(d)
    value_dirs = rng.normal(size=(cfg.n_clusters, d)) / np.sqrt(d)
    item_values = value_dirs[cluster] + 0.1 * rng.normal(size=(cfg.n_items, d)) / np.sqrt(d)
    by_cluster = [np.flatnonzero(cluster == c) for c in range(cfg.n_clusters)]

    lengths = _lengths(cfg, rng)
    users, su, si, st = [], [], [], []
    for u in range(cfg.n_users):
        pref = rng.dirichlet(np.full(cfg.n_clusters, 0.5))
        L = int(lengths[u])
        cl = rng.choice(cfg.n_clusters, size=L, p=pref)
        items = np.array([by_cluster[c][rng.integers(by_cluster[c].size)] for c in cl], dtype=np.int64)
        t_last = T_END - int(rng.integers(0, DAY))
        ts = np.sort(t_last - rng.integers(0, int(cfg.span_days * DAY), size=L))
        ts[-1] = t_last
        users.append(EventSequence(items, item_keys[items], item_values[items], ts, user_id=u))
        for _ in range(cfg.samples_per_user):
            su.append(u)
            if rng.random() < 0.5:
                si.append(int(items[rng.integers(L)]))
            else:
                si.append(int(rng.integers(cfg.n_items)))
            st.append(t_last + int(rng.integers(1, DAY)))
    su, si, st = np.array(su), np.array(si), np.array(st, dtype=np.int64)

    w_planted = rng.normal(size=d)
    tau = 2.0
    raw = np.empty(su.size)
    for k in range(su.size):
        seq = users[su[k]]
        ck = centers[cluster[seq.item_ids]]
        logits = tau * (ck @ centers[cluster[si[k]]]) / np.sqrt(d) - (st[k] - seq.timestamps) / (30 * DAY)
        a = np.exp(logits - logits.max())
        raw[k] = (a @ value_dirs[cluster[seq.item_ids]]) @ w_planted / a.sum()
    z = cfg.signal * (raw - raw.mean()) / (raw.std() + 1e-12)
    labels = (rng.random(su.size) < 1.0 / (1.0 + np.exp(-z))).astype(np.int64)
    meta = {"generator": "planted-cluster", **cfg.__dict__}
    return Dataset(item_keys, item_values, cluster, users, su, si, st, labels, meta)


# ---------------------------------------------------------------- I/O

_FLOAT = "%+.17e"


def _float_row(x) -> str:
    return " ".join(_FLOAT % v for v in x)


def write_dataset(ds: Dataset, out_dir, binary: bool = False) -> list:
    """Write the dataset; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    meta_path = os.path.join(out_dir, "meta.json")
    with open(meta_path, "w") as fh:
        json.dump({**ds.meta, "format": "binary" if binary else "text"}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if binary:
        path = os.path.join(out_dir, "dataset.npz")
        lens = np.array([len(u) for u in ds.users], dtype=np.int64)
        np.savez(
            path,
            item_keys=ds.item_keys, item_values=ds.item_values, item_cluster=ds.item_cluster,
            user_ids=np.array([u.user_id for u in ds.users], dtype=np.int64), lengths=lens,
            ev_items=np.concatenate([u.item_ids for u in ds.users]),
            ev_keys=np.vstack([u.key_feats for u in ds.users]),
            ev_values=np.vstack([u.value_feats for u in ds.users]),
            ev_times=np.concatenate([u.timestamps for u in ds.users]),
            sample_user=ds.sample_user, sample_item=ds.sample_item,
            sample_time=ds.sample_time, labels=ds.labels,
        )
        return [meta_path, path]
    d = ds.d_in
    ev_path = os.path.join(out_dir, "events.txt")
    with open(ev_path, "w") as fh:
        fh.write(f"# vql-events v1 d_in={d}\n")
        for u in ds.users:
            for i in range(len(u)):
                fh.write(
                    f"{u.user_id:8d} {u.item_ids[i]:10d} {u.timestamps[i]:12d} "
                    f"{_float_row(u.key_feats[i])} {_float_row(u.value_feats[i])}\n"
                )
    it_path = os.path.join(out_dir, "items.txt")
    with open(it_path, "w") as fh:
        fh.write(f"# vql-items v1 d_in={d}\n")
        for i in range(ds.item_keys.shape[0]):
            fh.write(f"{i:10d} {ds.item_cluster[i]:6d} {_float_row(ds.item_keys[i])} {_float_row(ds.item_values[i])}\n")
    sp_path = os.path.join(out_dir, "samples.txt")
    with open(sp_path, "w") as fh:
        fh.write("# vql-samples v1\n")
        for k in range(ds.num_samples):
            fh.write(f"{ds.users[ds.sample_user[k]].user_id:8d} {ds.sample_item[k]:10d} {ds.sample_time[k]:12d} {ds.labels[k]:1d}\n")
    return [meta_path, ev_path, it_path, sp_path]


def _header_dim(line: str, kind: str, path) -> int:
    parts = line.split()
    if len(parts) < 3 or parts[0] != "#" or parts[1] != f"vql-{kind}" or parts[2] != "v1":
        raise MalformedEventLogError(f"{path}: missing or unknown header")
    for p in parts[3:]:
        if p.startswith("d_in="):
            return int(p[5:])
    return -1


def _load_table(path, kind: str, ncols_fn):
    if not os.path.exists(path):
        raise MissingInputError(f"missing input file: {path}")
    with open(path) as fh:
        header = fh.readline()
        d = _header_dim(header, kind, path)
        rows = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != ncols_fn(d):
                raise MalformedEventLogError(f"{path}:{lineno}: expected {ncols_fn(d)} fields, got {len(parts)}")
            rows.append(parts)
    try:
        arr = np.array(rows, dtype=object)
    except ValueError as exc:  # pragma: no cover - ragged rows are caught above
        raise MalformedEventLogError(str(exc)) from exc
    return d, arr


def _ints(col, path):
    try:
        return np.array([int(x) for x in col], dtype=np.int64)
    except ValueError as exc:
        raise MalformedEventLogError(f"{path}: non-integer id or timestamp") from exc


def _floats(block, path):
    try:
        out = np.array(block, dtype=DTYPE)
    except ValueError as exc:
        raise MalformedEventLogError(f"{path}: non-numeric feature") from exc
    if not np.all(np.isfinite(out)):
        raise MalformedEventLogError(f"{path}: non-finite feature")
    return out


def read_event_log(path) -> list:
    """Parse an event log into one :class:`EventSequence` per user (first-seen order)."""
    d, arr = _load_table(path, "events", lambda d: 3 + 2 * d)
    if d <= 0:
        raise MalformedEventLogError(f"{path}: header lacks d_in")
    if arr.size == 0:
        return []
    users = _ints(arr[:, 0], path)
    items = _ints(arr[:, 1], path)
    times = _ints(arr[:, 2], path)
    feats = _floats(arr[:, 3:].astype(str), path)
    out = []
    _, first = np.unique(users, return_index=True)
    for u in users[np.sort(first)]:
        m = users == u
        order = np.argsort(times[m], kind="stable")
        out.append(
            EventSequence(items[m][order], feats[m][order, :d], feats[m][order, d:], times[m][order], int(u))
        )
    return out


def read_dataset(path) -> Dataset:
    """Load a dataset directory written by :func:`write_dataset`."""
    if not os.path.isdir(path):
        raise MissingInputError(f"dataset directory not found: {path}")
    meta = {}
    meta_path = os.path.join(path, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
    npz = os.path.join(path, "dataset.npz")
    if os.path.exists(npz):
        z = np.load(npz)
        users, off = [], 0
        for uid, L in zip(z["user_ids"], z["lengths"]):
            sl = slice(off, off + int(L))
            users.append(EventSequence(z["ev_items"][sl], z["ev_keys"][sl], z["ev_values"][sl], z["ev_times"][sl], int(uid)))
            off += int(L)
        return Dataset(
            z["item_keys"], z["item_values"], z["item_cluster"], users,
            z["sample_user"], z["sample_item"], z["sample_time"], z["labels"], meta,
        )
    users = read_event_log(os.path.join(path, "events.txt"))
    it_path = os.path.join(path, "items.txt")
    d, items = _load_table(it_path, "items", lambda d: 2 + 2 * d)
    ids = _ints(items[:, 0], it_path)
    if not np.array_equal(ids, np.arange(ids.size)):
        raise MalformedEventLogError(f"{it_path}: item ids must be 0..I-1 in order")
    feats = _floats(items[:, 2:].astype(str), it_path)
    sp_path = os.path.join(path, "samples.txt")
    _, sm = _load_table(sp_path, "samples", lambda d: 4)
    cols = [_ints(sm[:, j], sp_path) for j in range(4)]
    uidx = {u.user_id: k for k, u in enumerate(users)}
    try:
        sample_user = np.array([uidx[u] for u in cols[0]], dtype=np.int64)
    except KeyError as exc:
        raise MalformedEventLogError(f"{sp_path}: sample refers to unknown user {exc}") from exc
    return Dataset(
        feats[:, :d], feats[:, d:], _ints(items[:, 1], it_path), users,
        sample_user, cols[1], cols[2], cols[3], meta,
    )
