"""Desk-scale end-to-end trainer for key-only VQ attention on CTR data.

Model, per candidate ``x`` and user history ``(S_k, S_v, t)``::

    K = S_k W_k            V = clip(S_v W_v, c)         q = x W_q
    per group g:   K_hat_g = nearest codewords of K_g
    per head h:    a_h = softmax(q_h K_hat_g^T / sqrt(d_g) + log kappa_g)
                   o_h = a_h V_g
    p = sigmoid([o_1 .. o_H, x] . w + b)

``kappa_g`` is the gated mixture of exponential time kernels (1 when no
temporal scales are configured). Gradients reach ``W_k`` through the
straight-through estimator; codebooks move by :func:`vql.vq.update_codebook`.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import rankdata

from .attention import GvqConfig
from .errors import CausalityError, ParameterError, ShapeError, TrainingDivergenceError
from .numkern import DTYPE, clip_row_norms, row_norms, row_softmax
from .vq import (
    Assignment,
    Codebook,
    VqLossTerms,
    assign_nearest,
    reinit_dead_codes,
    update_codebook,
)

LR_GRID = (1e-3, 3e-4, 1e-4)
PRED_CLAMP = 1e-12


@dataclass
class TrainConfig:
    d: int = 16
    codebook_size: int = 100
    num_groups: int = 1
    num_heads: int = 1
    lambdas: tuple = None
    alpha: float = 1.0
    beta: float = 0.25
    lr: float = 1e-3
    codebook_lr: float = None
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0
    value_norm_bound: float = 4.0
    reinit_min_usage: int = 1
    quantize: bool = True
    dump_dir: str = None

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("alpha and beta must be nonnegative")
        if self.lr < 0:
            raise ParameterError("lr must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch size must be positive and epochs nonnegative")
        if self.lambdas is not None:
            self.lambdas = tuple(float(x) for x in self.lambdas)
        self.gvq  # validates divisibility

    @property
    def gvq(self) -> GvqConfig:
        return GvqConfig(self.d, self.num_groups, self.num_heads)

    @property
    def num_scales(self) -> int:
        return 0 if not self.lambdas else len(self.lambdas)

    @property
    def query_dim(self) -> int:
        return self.num_heads * self.gvq.group_dim

    @property
    def effective_codebook_lr(self) -> float:
        return self.lr if self.codebook_lr is None else self.codebook_lr

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    codebooks: list
    gate_w: list
    gate_b: list
    head_w: np.ndarray
    head_b: float = 0.0

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.W_q.copy(), self.W_k.copy(), self.W_v.copy(),
            [c.copy() for c in self.codebooks],
            [g.copy() for g in self.gate_w], [g.copy() for g in self.gate_b],
            self.head_w.copy(), float(self.head_b),
        )

    def dense_blocks(self) -> dict:
        """Name -> array for every parameter trained by backprop (views, not copies)."""
        out = {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "head_w": self.head_w}
        for g, (w, b) in enumerate(zip(self.gate_w, self.gate_b)):
            out[f"gate_w{g}"] = w
            out[f"gate_b{g}"] = b
        return out

    def all_finite(self) -> bool:
        arrays = list(self.dense_blocks().values()) + [c.codewords for c in self.codebooks]
        return all(np.all(np.isfinite(a)) for a in arrays) and np.isfinite(self.head_b)

    def save(self, path, cfg: TrainConfig = None) -> None:
        arrays = {k: v for k, v in self.dense_blocks().items()}
        arrays["head_b"] = np.array([self.head_b])
        for g, c in enumerate(self.codebooks):
            arrays[f"codebook{g}"] = c.codewords
        arrays["config"] = np.frombuffer(json.dumps(cfg.to_dict() if cfg else {}, sort_keys=True).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        """Returns ``(params, cfg)``."""
        z = np.load(path)
        cfg_dict = json.loads(bytes(z["config"]).decode() or "{}")
        cfg = TrainConfig(**cfg_dict) if cfg_dict else None
        G = sum(1 for k in z.files if k.startswith("codebook"))
        params = cls(
            z["W_q"].copy(), z["W_k"].copy(), z["W_v"].copy(),
            [Codebook(z[f"codebook{g}"].copy()) for g in range(G)],
            [z[f"gate_w{g}"].copy() for g in range(G)],
            [z[f"gate_b{g}"].copy() for g in range(G)],
            z["head_w"].copy(), float(z["head_b"][0]),
        )
        return params, cfg


# ---------------------------------------------------------------- losses


def rec_loss(preds, labels) -> float:
    """Mean binary cross-entropy with predictions clamped away from 0 and 1."""
    p = np.asarray(preds, dtype=DTYPE)
    y = np.asarray(labels, dtype=DTYPE)
    if p.shape != y.shape:
        raise ShapeError("preds and labels differ in length")
    p = np.clip(p, PRED_CLAMP, 1.0 - PRED_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def joint_loss(rec: float, vq_terms, alpha: float) -> float:
    """``rec + alpha * sum_g (codebook_g + beta * commitment_g)``."""
    if alpha < 0:
        raise ParameterError("alpha must be nonnegative")
    if isinstance(vq_terms, VqLossTerms):
        vq_terms = [vq_terms]
    return float(rec + alpha * sum(t.total for t in vq_terms))


def auc(scores, labels) -> float:
    """Exact ROC AUC from the rank-sum statistic (ties get average ranks)."""
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# ---------------------------------------------------------------- init


def _batches(n: int, cfg: TrainConfig, epoch: int):
    perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    return [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]


def init_params(dataset, cfg: TrainConfig) -> ModelParams:
    """Random projections; codebooks seeded by k-means++ on the first batch's keys."""
    rng = np.random.default_rng(cfg.seed)
    d_in, gv = dataset.d_in, cfg.gvq
    W_q = rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, cfg.query_dim))
    W_k = rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, cfg.d))
    W_v = rng.normal(scale=1.0 / np.sqrt(d_in), size=(d_in, cfg.d))
    head_w = rng.normal(scale=0.01, size=cfg.query_dim + d_in)
    first = _batches(dataset.num_samples, cfg, 0)[0]
    users = np.unique(dataset.sample_user[first])
    keys = np.vstack([dataset.users[u].key_feats for u in users]) @ W_k
    codebooks = [
        Codebook.kmeans_pp(keys[:, gv.group_slice(g)], cfg.codebook_size, rng)
        for g in range(gv.num_groups)
    ]
    M = cfg.num_scales
    gate_w = [np.zeros((M, len(gv.heads_of(g)) * gv.group_dim)) for g in range(gv.num_groups)]
    gate_b = [np.zeros(M) for _ in range(gv.num_groups)]
    return ModelParams(W_q, W_k, W_v, codebooks, gate_w, gate_b, head_w, 0.0)


# ---------------------------------------------------------------- forward / backward


class _UserPass:
    """Forward pass for one user's history and ``B`` candidates, with backward.

    ``fixed`` = ``(assignments, K0)`` freezes the quantizer: the reconstruction
    is ``K_hat0 + (K - K0)``, the straight-through surrogate whose gradient at
    ``K == K0`` is the STE gradient.
    """

    def __init__(self, seq, X, t_q, params: ModelParams, cfg: TrainConfig, fixed=None, exact_also=False):
        gv = cfg.gvq
        dg = gv.group_dim
        self.cfg, self.params, self.seq, self.X = cfg, params, seq, X
        self.K = seq.key_feats @ params.W_k
        self.Vraw = seq.value_feats @ params.W_v
        self.V = clip_row_norms(self.Vraw, cfg.value_norm_bound)
        self.q = X @ params.W_q
        self.Q = [self.q[:, h * dg : (h + 1) * dg] / np.sqrt(dg) for h in range(gv.num_heads)]

        self.assign, self.Khat, self.Kcommit_ref = [], [], []
        for g in range(gv.num_groups):
            sl = gv.group_slice(g)
            Kg = self.K[:, sl]
            if not cfg.quantize:
                self.assign.append(None)
                self.Khat.append(Kg)
                self.Kcommit_ref.append(Kg)
                continue
            if fixed is None:
                a = assign_nearest(Kg, params.codebooks[g])
                kh = params.codebooks[g].codewords[a.indices]
                self.Khat.append(kh)
            else:
                a = fixed[0][g]
                kh0 = params.codebooks[g].codewords[a.indices]
                self.Khat.append(kh0 + (Kg - fixed[1][:, sl]))
                kh = kh0
            self.assign.append(a)
            self.Kcommit_ref.append(kh)
        # codebook loss value uses sg[K]: under the surrogate that is K0
        self.K_sg = self.K if fixed is None else fixed[1]

        self.temporal = cfg.num_scales > 0
        self.logk, self.resp, self.theta, self.gin = [], [], [], []
        if self.temporal:
            lam = np.asarray(cfg.lambdas)
            gaps = np.asarray(t_q, dtype=DTYPE)[:, None] - seq.timestamps[None, :].astype(DTYPE)
            if np.any(gaps < 0):
                raise CausalityError("candidate time precedes a history event")
            for g in range(gv.num_groups):
                gin = np.concatenate([self.Q[h] for h in gv.heads_of(g)], axis=1)
                theta = row_softmax(gin @ params.gate_w[g].T + params.gate_b[g])
                lk = np.log(theta)[:, :, None] - lam[None, :, None] * gaps[:, None, :]
                mx = lk.max(axis=1, keepdims=True)
                logk = (mx + np.log(np.exp(lk - mx).sum(axis=1, keepdims=True)))[:, 0, :]
                self.gin.append(gin)
                self.theta.append(theta)
                self.logk.append(logk)
                self.resp.append(np.exp(lk - logk[:, None, :]))

        self.alpha, outs = [], []
        for h in range(gv.num_heads):
            g = gv.head_to_group[h]
            s = self.Q[h] @ self.Khat[g].T
            if self.temporal:
                s = s + self.logk[g]
            a = row_softmax(s)
            self.alpha.append(a)
            outs.append(a @ self.V[:, gv.group_slice(g)])
        self.O = np.concatenate(outs, axis=1)
        if exact_also:
            ex = []
            for h in range(gv.num_heads):
                g = gv.head_to_group[h]
                s = self.Q[h] @ self.K[:, gv.group_slice(g)].T
                if self.temporal:
                    s = s + self.logk[g]
                ex.append(row_softmax(s) @ self.V[:, gv.group_slice(g)])
            self.O_exact = np.concatenate(ex, axis=1)
        self.feats = np.concatenate([self.O, X], axis=1)
        self.z = self.feats @ params.head_w + params.head_b
        self.p = expit(self.z)

        self.vq_terms = []
        for g in range(gv.num_groups):
            if not cfg.quantize:
                self.vq_terms.append(VqLossTerms(0.0, 0.0, cfg.beta))
                continue
            sl = gv.group_slice(g)
            cb = np.mean(np.sum((self.K_sg[:, sl] - self.Kcommit_ref[g]) ** 2, axis=1))
            cm = np.mean(np.sum((self.K[:, sl] - self.Kcommit_ref[g]) ** 2, axis=1))
            self.vq_terms.append(VqLossTerms(float(cb), float(cm), cfg.beta))

    def rec_terms(self, y) -> np.ndarray:
        """Per-sample BCE in logit form (no clamping; identical away from the clamp)."""
        return -(y * log_expit(self.z) + (1.0 - y) * log_expit(-self.z))

    def backward(self, dz: np.ndarray, vq_weight: float) -> dict:
        """Gradients of ``sum(dz * z) + vq_weight * sum_g vq_g`` w.r.t. dense params."""
        cfg, params, gv = self.cfg, self.params, self.cfg.gvq
        dg = gv.group_dim
        grads = {k: np.zeros_like(v) for k, v in params.dense_blocks().items()}
        grads["head_b"] = float(dz.sum())
        grads["head_w"] = self.feats.T @ dz
        dO = np.outer(dz, params.head_w[: self.O.shape[1]])
        dQ = [np.zeros_like(q) for q in self.Q]
        dK = np.zeros_like(self.K)
        dV = np.zeros_like(self.V)
        dlogk = [np.zeros_like(l) for l in self.logk]
        for h in range(gv.num_heads):
            g = gv.head_to_group[h]
            sl = gv.group_slice(g)
            a = self.alpha[h]
            do = dO[:, h * dg : (h + 1) * dg]
            da = do @ self.V[:, sl].T
            dV[:, sl] += a.T @ do
            ds = a * (da - np.sum(a * da, axis=1, keepdims=True))
            dQ[h] += ds @ self.Khat[g]
            dK[:, sl] += ds.T @ self.Q[h]  # straight-through: dK = dK_hat
            if self.temporal:
                dlogk[g] += ds
        if self.temporal:
            for g in range(gv.num_groups):
                R = np.einsum("bi,bmi->bm", dlogk[g], self.resp[g])
                dact = R - self.theta[g] * R.sum(axis=1, keepdims=True)
                grads[f"gate_w{g}"] = dact.T @ self.gin[g]
                grads[f"gate_b{g}"] = dact.sum(axis=0)
                dgin = dact @ params.gate_w[g]
                for k, h in enumerate(gv.heads_of(g)):
                    dQ[h] += dgin[:, k * dg : (k + 1) * dg]
        if cfg.quantize and vq_weight:
            L = self.K.shape[0]
            for g in range(gv.num_groups):
                sl = gv.group_slice(g)
                dK[:, sl] += vq_weight * cfg.beta * 2.0 * (self.K[:, sl] - self.Kcommit_ref[g]) / L
        dq = np.concatenate(dQ, axis=1) / np.sqrt(dg)
        grads["W_q"] = self.X.T @ dq
        grads["W_k"] = self.seq.key_feats.T @ dK
        grads["W_v"] = self.seq.value_feats.T @ _clip_backward(self.Vraw, dV, cfg.value_norm_bound)
        return grads


def _clip_backward(vraw: np.ndarray, dv: np.ndarray, c: float) -> np.ndarray:
    n = row_norms(vraw)
    over = n > c
    out = dv.copy()
    if np.any(over):
        u = vraw[over] / n[over, None]
        g = dv[over]
        out[over] = (c / n[over, None]) * (g - u * np.sum(u * g, axis=1, keepdims=True))
    return out


def _by_user(dataset, idx):
    users = dataset.sample_user[idx]
    for u in np.unique(users):
        yield int(u), idx[users == u]


def batch_loss_and_grads(dataset, idx, params: ModelParams, cfg: TrainConfig, fixed=None, want_grads=True):
    """Joint loss over samples ``idx`` (mean) and its gradients.

    ``fixed`` maps user index -> ``(assignments, K0)`` to hold the quantizer.
    Returns ``(loss, rec, vq_terms_per_group, grads, passes)``.
    """
    idx = np.asarray(idx)
    n = idx.size
    total_rec = 0.0
    vq_acc = np.zeros((cfg.num_groups, 2))
    grads = None
    passes = {}
    for u, sidx in _by_user(dataset, idx):
        seq = dataset.users[u]
        fp = _UserPass(
            seq, dataset.candidates(sidx), dataset.sample_time[sidx], params, cfg,
            fixed=None if fixed is None else fixed[u],
        )
        y = dataset.labels[sidx].astype(DTYPE)
        total_rec += fp.rec_terms(y).sum()
        w = sidx.size / n
        for g, t in enumerate(fp.vq_terms):
            vq_acc[g] += w * np.array([t.codebook_loss, t.commitment_loss])
        passes[u] = (fp, sidx)
        if want_grads:
            gr = fp.backward((fp.p - y) / n, cfg.alpha * w)
            if grads is None:
                grads = gr
            else:
                for k in grads:
                    grads[k] = grads[k] + gr[k]
    rec = total_rec / n
    terms = [VqLossTerms(float(a), float(b), cfg.beta) for a, b in vq_acc]
    return joint_loss(rec, terms, cfg.alpha), rec, terms, grads, passes


def _apply_sgd(params: ModelParams, grads: dict, lr: float) -> None:
    if lr == 0:
        return
    for name, arr in params.dense_blocks().items():
        arr -= lr * grads[name]
    params.head_b -= lr * grads["head_b"]


def _dump_state(params: ModelParams, cfg: TrainConfig, tag: str):
    if not cfg.dump_dir:
        return None
    os.makedirs(cfg.dump_dir, exist_ok=True)
    path = os.path.join(cfg.dump_dir, f"diverged_{tag}.npz")
    params.save(path, cfg)
    return path


def train_step(dataset, idx, params: ModelParams, cfg: TrainConfig, epoch: int = 0, step: int = 0) -> dict:
    """One synchronous SGD step in place; returns the pre-step losses."""
    loss, rec, terms, grads, passes = batch_loss_and_grads(dataset, idx, params, cfg)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        snapshot = params.copy()
        path = _dump_state(snapshot, cfg, f"e{epoch}_s{step}")
        raise TrainingDivergenceError(f"non-finite loss at epoch {epoch} step {step}", snapshot, path)
    if cfg.quantize:
        gv = cfg.gvq
        for g in range(gv.num_groups):
            keys = np.vstack([fp.K[:, gv.group_slice(g)] for fp, _ in passes.values()])
            idxs = np.concatenate([fp.assign[g].indices for fp, _ in passes.values()])
            update_codebook(params.codebooks[g], keys, Assignment(idxs, cfg.codebook_size), cfg.effective_codebook_lr)
    _apply_sgd(params, grads, cfg.lr)
    return {"loss": loss, "rec": rec, "vq": terms}


def output_gap_and_bound(seq, X, t_q, params: ModelParams, cfg: TrainConfig):
    """Measured quantized-vs-exact attention output gap and its worst-case bound.

    Returns ``(gap, bound, max_key_err)`` where ``gap`` is the largest
    per-head, per-candidate l2 output difference and
    ``bound = c * max ||q|| * max_i ||e_i||``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    tq = np.broadcast_to(np.asarray(t_q, dtype=DTYPE), (X.shape[0],))
    ex = _UserPass(seq, X, tq, params, cfg, exact_also=True)
    err = float(row_norms(ex.K - np.concatenate(ex.Kcommit_ref, axis=1)).max())
    dg = cfg.gvq.group_dim
    gap = max(
        float(row_norms(ex.O[:, h * dg : (h + 1) * dg] - ex.O_exact[:, h * dg : (h + 1) * dg]).max())
        for h in range(cfg.num_heads)
    )
    qn = max(float(row_norms(q).max()) for q in ex.Q)
    return gap, cfg.value_norm_bound * qn * err, err


def evaluate(dataset, params: ModelParams, cfg: TrainConfig, idx=None) -> dict:
    """Losses, AUC, worst key error and the measured train-vs-exact output gap."""
    idx = np.arange(dataset.num_samples) if idx is None else np.asarray(idx)
    loss, rec, terms, _, passes = batch_loss_and_grads(dataset, idx, params, cfg, want_grads=False)
    preds = np.empty(idx.size)
    pos = {s: k for k, s in enumerate(idx.tolist())}
    max_err, max_gap, max_bound, bound_ok = 0.0, 0.0, 0.0, True
    for u, (fp, sidx) in passes.items():
        preds[[pos[s] for s in sidx.tolist()]] = fp.p
        gap, bound, user_err = output_gap_and_bound(fp.seq, fp.X, dataset.sample_time[sidx], params, cfg)
        max_err = max(max_err, user_err)
        bound_ok &= gap <= bound
        max_gap, max_bound = max(max_gap, gap), max(max_bound, bound)
    y = dataset.labels[idx]
    return {
        "joint_loss": loss,
        "rec_loss": rec_loss(preds, y),
        "vq_loss": [t.total for t in terms],
        "codebook_loss": [t.codebook_loss for t in terms],
        "max_key_err": max_err,
        "max_output_gap": max_gap,
        "bound": max_bound,
        "bound_ok": bool(bound_ok),
        "auc": auc(preds, y),
    }


def train_epoch(dataset, params: ModelParams, cfg: TrainConfig, epoch: int = 0):
    """One pass of minibatch SGD. Returns ``(new_params, metrics)``; the input is not modified.

    With ``lr == 0`` (and no separate codebook rate) nothing moves, dead-code
    reinitialization included.
    """
    params = params.copy()
    run_loss, run_rec, seen = 0.0, 0.0, 0
    for step, idx in enumerate(_batches(dataset.num_samples, cfg, epoch)):
        out = train_step(dataset, idx, params, cfg, epoch, step)
        run_loss += out["loss"] * idx.size
        run_rec += out["rec"] * idx.size
        seen += idx.size
    if cfg.quantize and cfg.reinit_min_usage > 0 and cfg.effective_codebook_lr > 0:
        gv = cfg.gvq
        keys = np.vstack([u.key_feats for u in dataset.users]) @ params.W_k
        for g, cb in enumerate(params.codebooks):
            reinit_dead_codes(cb, keys[:, gv.group_slice(g)], cfg.reinit_min_usage, rng_seed=cfg.seed * 100003 + epoch * 101 + g)
    metrics = evaluate(dataset, params, cfg)
    metrics["train_joint_loss"] = run_loss / max(seen, 1)
    metrics["train_rec_loss"] = run_rec / max(seen, 1)
    metrics["epoch"] = epoch
    return params, metrics


def train(dataset, cfg: TrainConfig, params: ModelParams = None, log=None):
    """Run ``cfg.epochs`` epochs; history[0] is the evaluation at initialization."""
    params = init_params(dataset, cfg) if params is None else params
    history = [{**evaluate(dataset, params, cfg), "epoch": -1}]
    if log:
        log(history[0])
    for epoch in range(cfg.epochs):
        params, m = train_epoch(dataset, params, cfg, epoch)
        history.append(m)
        if log:
            log(m)
    return params, history


def forward_predict(seq, candidate, params: ModelParams, cfg: TrainConfig, t_q=None):
    """Click probability for one candidate (1-d) or a batch of candidates (2-d)."""
    X = np.atleast_2d(np.asarray(candidate, dtype=DTYPE))
    if t_q is None:
        t_q = seq.timestamps.max()
    tq = np.broadcast_to(np.asarray(t_q, dtype=DTYPE), (X.shape[0],))
    p = _UserPass(seq, X, tq, params, cfg).p
    return p if np.ndim(candidate) == 2 else float(p[0])


# ---------------------------------------------------------------- gradient audit


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom < 1e-300 else float(np.linalg.norm(a - b) / denom)


@dataclass
class GradCheckReport:
    rel_errors: dict
    skipped: int
    checked: int

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values()) if self.rel_errors else 0.0


def finite_diff_check(params: ModelParams, dataset, idx, cfg: TrainConfig, eps: float = 1e-5,
                      blocks=None, max_entries: int = None, seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients with central differences of the joint loss.

    Quantizer assignments are frozen at the base point. ``W_k`` is checked
    against the straight-through surrogate ``K_hat0 + (K - K0)``, whose exact
    gradient is the STE gradient. Entries whose perturbation would flip an
    assignment are skipped. Errors are per block: ``|a - n| / max(|a|, |n|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ParameterError("eps must lie in [1e-7, 1e-4]")
    idx = np.asarray(idx)
    params = params.copy()
    _, _, _, grads, passes = batch_loss_and_grads(dataset, idx, params, cfg)
    fixed = {u: (fp.assign, fp.K.copy()) for u, (fp, _) in passes.items()} if cfg.quantize else None
    dense = params.dense_blocks()
    names = blocks or [k for k in dense if k != "W_k" or cfg.quantize] + ["head_b"]
    rng = np.random.default_rng(seed)
    rel, skipped, checked = {}, 0, 0

    def loss():
        return batch_loss_and_grads(dataset, idx, params, cfg, fixed=fixed, want_grads=False)[0]

    def flips() -> bool:
        if not cfg.quantize:
            return False
        for u, (fp, _) in passes.items():
            K = dataset.users[u].key_feats @ params.W_k
            for g in range(cfg.num_groups):
                a = assign_nearest(K[:, cfg.gvq.group_slice(g)], params.codebooks[g])
                if not np.array_equal(a.indices, fp.assign[g].indices):
                    return True
        return False

    for name in names:
        if name == "head_b":
            old = params.head_b
            params.head_b = old + eps
            fp_ = loss()
            params.head_b = old - eps
            fm_ = loss()
            params.head_b = old
            rel[name] = relative_error(grads["head_b"], (fp_ - fm_) / (2 * eps))
            checked += 1
            continue
        arr = dense[name]
        if arr.size == 0:
            continue
        entries = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            entries = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        keep = []
        flat = arr.reshape(-1)
        for i in entries:
            if name == "W_k":
                old = flat[i]
                bad = False
                for delta in (eps, -eps):
                    flat[i] = old + delta
                    bad |= flips()
                flat[i] = old
                if bad:
                    skipped += 1
                    continue
            keep.append(i)
        if not keep:
            continue
        num = numerical_gradient(loss, arr, eps, keep).reshape(-1)[keep]
        ana = grads[name].reshape(-1)[keep]
        rel[name] = relative_error(ana, num)
        checked += len(keep)
    return GradCheckReport(rel, skipped, checked)
