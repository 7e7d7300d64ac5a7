"""Attention evaluators: exact, key-quantized, cached, grouped and temporal.

Queries handed to these functions are already scaled by ``1/sqrt(d)``; use
:meth:`AttentionInputs.from_raw` to build a consistent bundle from raw
projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CausalityError,
    ConfigError,
    DegenerateCacheError,
    EmptySequenceError,
    PreconditionError,
    ShapeError,
)
from .numkern import DTYPE, as_matrix, clip_row_norms, row_norms, row_softmax
from .vq import Codebook, assign_nearest, quantize, vq_loss

DEFAULT_VALUE_NORM_BOUND = 4.0
DAY = 86400.0
DEFAULT_LAMBDAS = (1.0 / DAY, 1.0 / (7 * DAY), 1.0 / (30 * DAY))


@dataclass
class AttentionInputs:
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    value_norm_bound: float = DEFAULT_VALUE_NORM_BOUND

    def __post_init__(self):
        self.queries = as_matrix(self.queries, "queries")
        self.keys = as_matrix(self.keys, "keys")
        self.values = as_matrix(self.values, "values")
        if self.keys.shape[0] != self.values.shape[0]:
            raise ShapeError("keys and values must have the same number of rows")
        if self.queries.shape[1] != self.keys.shape[1]:
            raise ShapeError("query and key dims differ")
        if np.any(row_norms(self.values) > self.value_norm_bound):
            raise PreconditionError("value rows exceed the norm bound; clip them first")

    @classmethod
    def from_raw(cls, q, keys, values, value_norm_bound: float = DEFAULT_VALUE_NORM_BOUND):
        """Scale raw queries by ``1/sqrt(d)`` and clip value rows to the norm bound."""
        q = as_matrix(np.atleast_2d(q), "queries")
        return cls(
            q / np.sqrt(q.shape[1]),
            keys,
            clip_row_norms(as_matrix(values, "values"), value_norm_bound),
            value_norm_bound,
        )

    @property
    def length(self) -> int:
        return self.keys.shape[0]


def _weighted_average(logits: np.ndarray, values: np.ndarray) -> np.ndarray:
    return row_softmax(logits) @ values


def oracle_attention(inputs: AttentionInputs) -> np.ndarray:
    """Exact ``softmax(Q K^T) V``; O(B L d)."""
    if inputs.length == 0:
        raise EmptySequenceError("attention over an empty sequence")
    return _weighted_average(inputs.queries @ inputs.keys.T, inputs.values)


def train_attention(inputs: AttentionInputs, codebook: Codebook, beta: float = 0.25):
    """Key-only quantized attention as used during training.

    Returns ``(outputs, loss_terms, assignment)``. Values are left untouched;
    only the keys are replaced by their nearest codewords.
    """
    if inputs.length == 0:
        raise EmptySequenceError("attention over an empty sequence")
    if codebook.dim != inputs.keys.shape[1]:
        raise ShapeError("codebook dim does not match key dim")
    assignment = assign_nearest(inputs.keys, codebook)
    k_hat = quantize(inputs.keys, codebook, assignment)
    out = _weighted_average(inputs.queries @ k_hat.T, inputs.values)
    return out, vq_loss(inputs.keys, k_hat, beta), assignment


def _cached_ratio(scores: np.ndarray, v_cache: np.ndarray, ones_cache: np.ndarray) -> np.ndarray:
    """``exp(S) @ v / exp(S) @ ones`` with a shared per-row shift.

    The shift is the max over nonempty buckets only; empty buckets contribute
    zero to both sides whatever their score, and letting them set the shift
    could underflow every populated term.
    """
    live = ones_cache > 0
    if not np.any(live):
        raise DegenerateCacheError("cache holds no events")
    shift = np.max(scores[:, live], axis=1, keepdims=True)
    # live entries are already <= 0; the clamp only stops an empty bucket
    # from overflowing to inf and turning its zero weight into NaN
    e = np.exp(np.minimum(scores - shift, 0.0))
    return (e @ v_cache) / (e @ ones_cache)[:, None]


def _flat_ones(ones_cache) -> np.ndarray:
    ones = np.asarray(ones_cache, dtype=DTYPE)
    return ones.reshape(-1)


def infer_attention(queries, codebook: Codebook, v_cache, ones_cache) -> np.ndarray:
    """Length-free cached attention: cost O(B N d) regardless of history length."""
    queries = np.atleast_2d(np.asarray(queries, dtype=DTYPE))
    v_cache = np.asarray(v_cache, dtype=DTYPE)
    ones = _flat_ones(ones_cache)
    if v_cache.shape[0] != codebook.size or ones.shape[0] != codebook.size:
        raise ShapeError("cache rows must match codebook size")
    if queries.shape[1] != codebook.dim:
        raise ShapeError("query dim does not match codebook dim")
    if np.any(ones < 0):
        raise PreconditionError("ones cache must be nonnegative")
    return _cached_ratio(queries @ codebook.codewords.T, v_cache, ones)


def one_hot_extraction_check(u, w_onehot) -> bool:
    """Check ``exp(U) W == exp(U W)`` elementwise with zero tolerance."""
    u = np.asarray(u, dtype=DTYPE)
    w = np.asarray(w_onehot, dtype=DTYPE)
    if u.ndim != 2 or w.ndim != 2 or u.shape[1] != w.shape[0]:
        raise ShapeError("incompatible shapes for U W")
    if not (np.all((w == 0.0) | (w == 1.0)) and np.all(w.sum(axis=0) == 1.0)):
        raise PreconditionError("W must have exactly one 1 per column")
    lhs = np.exp(u) @ w
    rhs = np.exp(u @ w)
    return bool(np.array_equal(lhs, rhs))


# ---------------------------------------------------------------- grouped VQ


@dataclass(frozen=True)
class GvqConfig:
    d: int
    num_groups: int = 1
    num_heads: int = 1
    head_to_group: tuple = None

    def __post_init__(self):
        if self.num_groups < 1 or self.d % self.num_groups:
            raise ConfigError(f"groups ({self.num_groups}) must divide d ({self.d})")
        if self.num_heads < self.num_groups:
            raise ConfigError("need at least as many heads as groups")
        if self.head_to_group is None:
            if self.num_heads % self.num_groups:
                raise ConfigError("heads must be a multiple of groups for contiguous mapping")
            per = self.num_heads // self.num_groups
            object.__setattr__(self, "head_to_group", tuple(h // per for h in range(self.num_heads)))
        else:
            mapping = tuple(int(g) for g in self.head_to_group)
            if len(mapping) != self.num_heads or any(not 0 <= g < self.num_groups for g in mapping):
                raise ConfigError("head_to_group must map every head to a valid group")
            object.__setattr__(self, "head_to_group", mapping)

    @property
    def group_dim(self) -> int:
        return self.d // self.num_groups

    def heads_of(self, g: int) -> list:
        return [h for h, gg in enumerate(self.head_to_group) if gg == g]

    def group_slice(self, g: int) -> slice:
        return slice(g * self.group_dim, (g + 1) * self.group_dim)


def split_groups(x: np.ndarray, config: GvqConfig) -> list:
    """Split the channel axis of ``x`` into ``G`` contiguous blocks."""
    if x.shape[-1] != config.d:
        raise ShapeError(f"expected last dim {config.d}, got {x.shape[-1]}")
    return [x[..., config.group_slice(g)] for g in range(config.num_groups)]


def gvq_attention(query_heads, codebooks, caches, config: GvqConfig) -> np.ndarray:
    """Grouped cached attention; head outputs are concatenated in head order.

    ``caches[g]`` is ``(v_cache, ones_cache)`` for group ``g``. The output has
    ``H * d_g`` columns, which equals ``d`` when ``H == G``.
    """
    if len(query_heads) != config.num_heads:
        raise ShapeError("one query matrix per head expected")
    if len(codebooks) != config.num_groups or len(caches) != config.num_groups:
        raise ShapeError("one codebook and cache per group expected")
    outs = []
    for h, q in enumerate(query_heads):
        g = config.head_to_group[h]
        if codebooks[g].dim != config.group_dim:
            raise ShapeError(f"group {g} codebook dim != d/G")
        v, ones = caches[g]
        outs.append(infer_attention(q, codebooks[g], v, ones))
    return np.concatenate(outs, axis=1)


def gvq_cache_float_counts(caches) -> dict:
    """Float counts of the value and count caches across groups."""
    value = sum(int(np.asarray(v).size) for v, _ in caches)
    ones = sum(int(np.asarray(o).size) for _, o in caches)
    return {"value": value, "ones": ones, "total": value + ones}


# ---------------------------------------------------------------- temporal


@dataclass
class TemporalConfig:
    """Exponential decay scales plus the gate producing per-scale weights.

    ``gate_weight`` is ``M x q_dim`` and ``gate_bias`` has length ``M``; the
    gate reads the (scaled) query.
    """

    lambdas: np.ndarray
    gate_weight: np.ndarray
    gate_bias: np.ndarray = None
    time_origin: float = 0.0

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=DTYPE).reshape(-1)
        if self.lambdas.size < 1:
            raise ConfigError("need at least one temporal scale")
        if np.any(self.lambdas < 0) or not np.all(np.isfinite(self.lambdas)):
            raise ConfigError("decay rates must be finite and nonnegative")
        self.gate_weight = np.atleast_2d(np.asarray(self.gate_weight, dtype=DTYPE))
        if self.gate_weight.shape[0] != self.num_scales:
            raise ConfigError("gate weight needs one row per scale")
        if self.gate_bias is None:
            self.gate_bias = np.zeros(self.num_scales)
        self.gate_bias = np.asarray(self.gate_bias, dtype=DTYPE).reshape(-1)
        if self.gate_bias.shape != (self.num_scales,):
            raise ConfigError("gate bias needs one entry per scale")

    @property
    def num_scales(self) -> int:
        return self.lambdas.size

    @classmethod
    def default(cls, query_dim: int, lambdas=DEFAULT_LAMBDAS, rng=None, scale: float = 0.0):
        rng = np.random.default_rng(rng)
        lam = np.asarray(lambdas, dtype=DTYPE)
        w = rng.normal(scale=scale, size=(lam.size, query_dim)) if scale else np.zeros((lam.size, query_dim))
        return cls(lam, w, np.zeros(lam.size))


def gate_weights(query, config: TemporalConfig) -> np.ndarray:
    """Softmax gate over temporal scales; rows sum to one."""
    q = np.asarray(query, dtype=DTYPE)
    if q.shape[-1] != config.gate_weight.shape[1]:
        raise ShapeError("gate input dim mismatch")
    return row_softmax(q @ config.gate_weight.T + config.gate_bias)


def rebase_timestamps(timestamps, origin=None):
    """Shift timestamps so the latest event sits at 0; returns ``(rebased, origin)``."""
    t = np.asarray(timestamps, dtype=DTYPE)
    if origin is None:
        origin = float(t.max()) if t.size else 0.0
    return t - origin, origin


def temporal_kernel(t_q, t_k, lam):
    """``exp(-lam * (t_q - t_k))`` for ``t_q >= t_k``."""
    return np.exp(-lam * (np.asarray(t_q, dtype=DTYPE) - np.asarray(t_k, dtype=DTYPE)))


def _temporal_coefficients(query, t_q_rebased, config: TemporalConfig) -> np.ndarray:
    """Log of ``theta_m(Q) * exp(-lambda_m t_q)`` per query row and scale."""
    theta = gate_weights(query, config)
    with np.errstate(divide="ignore"):
        return np.log(theta) - config.lambdas[None, :] * t_q_rebased


def temporal_infer(query, t_q: float, codebook: Codebook, scale_caches, config: TemporalConfig,
                   gate_input=None) -> np.ndarray:
    """Cached attention with a gated mixture of separable exponential kernels.

    ``scale_caches[m]`` is ``(v_cache, ones_cache)`` built with history
    weights ``exp(lambda_m * (t_k - time_origin))``. ``t_q`` is absolute; it is
    rebased with ``config.time_origin`` here. The gate reads ``gate_input``
    when given (e.g. all heads sharing a group), otherwise the query itself.
    """
    single = np.ndim(query) == 1
    q = np.atleast_2d(np.asarray(query, dtype=DTYPE))
    if len(scale_caches) != config.num_scales:
        raise ShapeError("one cache pair per temporal scale expected")
    tq = float(t_q) - config.time_origin
    if tq < 0:
        raise CausalityError("query time precedes the latest history event")
    scores = q @ codebook.codewords.T
    ones_stack = np.stack([_flat_ones(o) for _, o in scale_caches])
    live = ones_stack.sum(axis=0) > 0
    if not np.any(live):
        raise DegenerateCacheError("cache holds no events")
    e = np.exp(np.minimum(scores - scores[:, live].max(axis=1, keepdims=True), 0.0))
    gin = q if gate_input is None else np.atleast_2d(np.asarray(gate_input, dtype=DTYPE))
    log_coef = _temporal_coefficients(gin, tq, config)
    coef = np.exp(log_coef - log_coef.max(axis=1, keepdims=True))
    num = np.zeros((q.shape[0], np.asarray(scale_caches[0][0]).shape[1]), dtype=DTYPE)
    den = np.zeros(q.shape[0], dtype=DTYPE)
    for m, (v, _) in enumerate(scale_caches):
        num += coef[:, m : m + 1] * (e @ np.asarray(v, dtype=DTYPE))
        den += coef[:, m] * (e @ ones_stack[m])
    if np.any(den <= 0):
        raise DegenerateCacheError("all kernel weights underflowed")
    out = num / den[:, None]
    return out[0] if single else out


def temporal_oracle(query, t_q: float, keys_hat, values, timestamps, config: TemporalConfig) -> np.ndarray:
    """Per-event evaluation: softmax(q k_hat + log sum_m theta_m Phi_m(t_q, t_k)) V."""
    single = np.ndim(query) == 1
    q = np.atleast_2d(np.asarray(query, dtype=DTYPE))
    t = np.asarray(timestamps, dtype=DTYPE)
    if np.any(t > t_q):
        raise CausalityError("query time precedes a history event")
    theta = gate_weights(q, config)
    gaps = float(t_q) - t
    with np.errstate(divide="ignore"):
        log_k = np.log(theta)[:, :, None] - config.lambdas[None, :, None] * gaps[None, None, :]
    m = log_k.max(axis=1, keepdims=True)
    log_kernel = (m + np.log(np.exp(log_k - m).sum(axis=1, keepdims=True)))[:, 0, :]
    out = row_softmax(q @ np.asarray(keys_hat).T + log_kernel) @ np.asarray(values)
    return out[0] if single else out


# ---------------------------------------------------------------- error bound


@dataclass(frozen=True)
class ErrorBoundReport:
    measured_output_err: float
    weight_l1_err: float
    logit_inf_err: float
    max_key_err: float
    query_norm: float
    value_norm_bound: float

    @property
    def bound(self) -> float:
        return self.value_norm_bound * self.query_norm * self.max_key_err

    @property
    def holds(self) -> bool:
        return self.measured_output_err <= self.bound and self.weight_l1_err <= self.logit_inf_err


def error_bound_report(inputs: AttentionInputs, codebook: Codebook, check: bool = True) -> ErrorBoundReport:
    """Measure the quantization-induced output error against its length-free bound.

    With several query rows, each field is the max over rows and the query
    norm is the largest row norm, so the per-row bound implies the batch one.
    """
    assignment = assign_nearest(inputs.keys, codebook)
    k_hat = quantize(inputs.keys, codebook, assignment)
    q = inputs.queries
    alpha = row_softmax(q @ inputs.keys.T)
    alpha_hat = row_softmax(q @ k_hat.T)
    err = inputs.keys - k_hat
    delta = q @ err.T
    out_err = row_norms(alpha @ inputs.values - alpha_hat @ inputs.values)
    report = ErrorBoundReport(
        measured_output_err=float(out_err.max()),
        weight_l1_err=float(np.abs(alpha - alpha_hat).sum(axis=1).max()),
        logit_inf_err=float(np.abs(delta).max()),
        max_key_err=float(row_norms(err).max()),
        query_norm=float(row_norms(q).max()),
        value_norm_bound=inputs.value_norm_bound,
    )
    if check and not report.holds:
        raise AssertionError(f"error bound violated: {report}")
    return report


def topk_discarded_mass(logits, k: int) -> np.ndarray:
    """Softmax mass outside the ``k`` largest logits, per row."""
    logits = np.atleast_2d(np.asarray(logits, dtype=DTYPE))
    L = logits.shape[1]
    if k >= L:
        return np.zeros(logits.shape[0])
    p = row_softmax(logits)
    top = np.partition(p, L - k, axis=1)[:, L - k :]
    return np.clip(1.0 - top.sum(axis=1), 0.0, 1.0)
