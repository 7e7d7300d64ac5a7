"""Online scoring for a trained model through the three caching tiers.

* heavy: per-user, per-group :class:`~vql.cache.CacheBundle` built offline;
  scoring touches only ``N x d_g`` aggregates.
* medium: per-user, per-group :class:`~vql.cache.AssignmentCSC`; values are
  projected and aggregated at request time.
* light: a global item -> code table; a user's codes are looked up, grouped
  into CSC form and aggregated at request time.

All three end in the same cached-ratio evaluation, so they agree up to the
bucket summation order (which is identical here, hence bitwise agreement in
practice).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .attention import TemporalConfig, infer_attention, temporal_infer
from .cache import (
    AssignmentCSC,
    CacheBundle,
    LightCache,
    build_assignment_csc,
    build_heavy_cache,
    build_light_cache,
    codebook_checksum,
)
from .errors import ConfigError, EmptySequenceError
from .numkern import DTYPE, clip_row_norms
from .trainer import ModelParams, TrainConfig
from .vq import Assignment, assign_nearest

TIERS = ("light", "medium", "heavy")


@dataclass
class Scorer:
    """A trained model plus the derived per-group helpers used at serving time."""

    params: ModelParams
    cfg: TrainConfig

    def __post_init__(self):
        gv = self.cfg.gvq
        if len(self.params.codebooks) != gv.num_groups:
            raise ConfigError("one codebook per group expected")
        self.gvq = gv
        self.checksums = [codebook_checksum(cb) for cb in self.params.codebooks]
        self.temporal = [
            TemporalConfig(np.asarray(self.cfg.lambdas), self.params.gate_w[g], self.params.gate_b[g])
            if self.cfg.num_scales
            else None
            for g in range(gv.num_groups)
        ]

    # ------------------------------------------------------------ projections

    def project_keys(self, key_feats) -> np.ndarray:
        return np.asarray(key_feats, dtype=DTYPE) @ self.params.W_k

    def project_values(self, value_feats) -> np.ndarray:
        v = np.asarray(value_feats, dtype=DTYPE) @ self.params.W_v
        return clip_row_norms(v, self.cfg.value_norm_bound)

    def assignments(self, seq) -> list:
        K = self.project_keys(seq.key_feats)
        return [
            assign_nearest(K[:, self.gvq.group_slice(g)], cb)
            for g, cb in enumerate(self.params.codebooks)
        ]

    # ------------------------------------------------------------ offline builders

    def build_light(self, item_ids, item_key_feats) -> LightCache:
        keys = self.project_keys(item_key_feats)
        slices = [self.gvq.group_slice(g) for g in range(self.gvq.num_groups)]
        return build_light_cache((item_ids, keys), self.params.codebooks, slices)

    def build_medium(self, seq) -> list:
        return [build_assignment_csc(a, a.num_codes) for a in self.assignments(seq)]

    def bundles_from_csc(self, cscs, seq) -> list:
        V = self.project_values(seq.value_feats)
        out = []
        for g, csc in enumerate(cscs):
            out.append(
                build_heavy_cache(
                    csc,
                    V[:, self.gvq.group_slice(g)],
                    seq.timestamps if self.temporal[g] else None,
                    self.temporal[g],
                    group_id=g,
                    codebook_checksum=self.checksums[g],
                )
            )
        return out

    def build_heavy(self, seq) -> list:
        return self.bundles_from_csc(self.build_medium(seq), seq)

    def cscs_from_light(self, light: LightCache, seq) -> list:
        out = []
        for g in range(self.gvq.num_groups):
            codes = light.lookup(seq.item_ids, g)
            out.append(build_assignment_csc(Assignment(codes, light.num_codes), light.num_codes))
        return out

    # ------------------------------------------------------------ scoring

    def score_heavy(self, bundles, candidates, t_q=None) -> np.ndarray:
        """Click probabilities for ``B`` candidates of one user from heavy bundles."""
        X = np.atleast_2d(np.asarray(candidates, dtype=DTYPE))
        gv, dg = self.gvq, self.gvq.group_dim
        q = X @ self.params.W_q
        Q = [q[:, h * dg : (h + 1) * dg] / np.sqrt(dg) for h in range(gv.num_heads)]
        outs = []
        for h in range(gv.num_heads):
            g = gv.head_to_group[h]
            b: CacheBundle = bundles[g]
            if b.event_count == 0:
                raise EmptySequenceError("user has no history events")
            cb = self.params.codebooks[g]
            if self.temporal[g] is None:
                outs.append(infer_attention(Q[h], cb, b.v_cache, b.ones_cache))
                continue
            if t_q is None:
                t_q = b.time_origin
            tc = self.temporal[g]
            cfg_g = TemporalConfig(tc.lambdas, tc.gate_weight, tc.gate_bias, time_origin=b.time_origin)
            gin = np.concatenate([Q[k] for k in gv.heads_of(g)], axis=1)
            outs.append(temporal_infer(Q[h], t_q, cb, b.scale_pairs(), cfg_g, gate_input=gin))
        z = np.concatenate(outs + [X], axis=1) @ self.params.head_w + self.params.head_b
        return expit(z)

    def score_medium(self, cscs, seq, candidates, t_q=None) -> np.ndarray:
        return self.score_heavy(self.bundles_from_csc(cscs, seq), candidates, t_q)

    def score_light(self, light: LightCache, seq, candidates, t_q=None) -> np.ndarray:
        return self.score_medium(self.cscs_from_light(light, seq), seq, candidates, t_q)

    def score(self, tier: str, cache, seq, candidates, t_q=None) -> np.ndarray:
        if tier == "heavy":
            return self.score_heavy(cache, candidates, t_q)
        if tier == "medium":
            return self.score_medium(cache, seq, candidates, t_q)
        if tier == "light":
            return self.score_light(cache, seq, candidates, t_q)
        raise ConfigError(f"unknown tier {tier!r}; expected one of {TIERS}")


def csc_storage_counts(cscs) -> dict:
    ints = sum(c.storage_counts()["ints"] for c in cscs)
    return {"ints": int(ints), "bytes": 8 * int(ints)}


def cache_nbytes(tier: str, cache) -> int:
    """Storage of a tier's per-user (heavy, medium) or global (light) cache in bytes."""
    if tier == "heavy":
        return int(sum(b.nbytes() for b in cache))
    if tier == "medium":
        return csc_storage_counts(cache)["bytes"]
    if tier == "light":
        return 8 * (len(cache) + int(cache.codes.size))
    raise ConfigError(f"unknown tier {tier!r}")


__all__ = ["TIERS", "Scorer", "AssignmentCSC", "cache_nbytes", "csc_storage_counts"]
