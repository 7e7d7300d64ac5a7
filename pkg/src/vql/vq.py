"""Codebooks, nearest-codeword assignment and the VQ losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CorruptionError, ParameterError, ShapeError
from .numkern import DTYPE, as_matrix

DEFAULT_BETA = 0.25
DEFAULT_CODEBOOK_SIZE = 100


@dataclass
class Codebook:
    codewords: np.ndarray
    usage: np.ndarray = None

    def __post_init__(self):
        self.codewords = as_matrix(self.codewords, "codewords")
        if self.codewords.shape[0] < 1:
            raise ParameterError("codebook must hold at least one codeword")
        if self.usage is None:
            self.usage = np.zeros(self.size, dtype=np.int64)
        else:
            self.usage = np.asarray(self.usage, dtype=np.int64)
            if self.usage.shape != (self.size,) or np.any(self.usage < 0):
                raise ParameterError("usage must be a nonnegative counter per codeword")

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.codewords.copy(), self.usage.copy())

    @classmethod
    def random(cls, size: int, dim: int, rng=None, scale: float = 1.0) -> "Codebook":
        rng = np.random.default_rng(rng)
        return cls(rng.normal(scale=scale, size=(size, dim)))

    @classmethod
    def kmeans_pp(cls, keys, size: int, rng=None) -> "Codebook":
        """Seed ``size`` codewords from ``keys`` with D^2 sampling."""
        keys = as_matrix(keys, "keys")
        rng = np.random.default_rng(rng)
        n = keys.shape[0]
        if n == 0:
            raise ParameterError("cannot seed a codebook from zero keys")
        centers = np.empty((size, keys.shape[1]), dtype=DTYPE)
        centers[0] = keys[rng.integers(n)]
        d2 = np.sum((keys - centers[0]) ** 2, axis=1)
        for j in range(1, size):
            total = d2.sum()
            if total <= 0.0:
                idx = rng.integers(n)
            else:
                idx = rng.choice(n, p=d2 / total)
            centers[j] = keys[idx]
            np.minimum(d2, np.sum((keys - centers[j]) ** 2, axis=1), out=d2)
        return cls(centers)


@dataclass
class Assignment:
    """Code index per event; the dense form is the one-hot matrix with one 1 per row."""

    indices: np.ndarray
    num_codes: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1:
            raise ShapeError("assignment indices must be 1-d")

    def __len__(self):
        return self.indices.shape[0]

    def validate(self):
        if len(self) and (self.indices.min() < 0 or self.indices.max() >= self.num_codes):
            raise CorruptionError(f"code index outside [0, {self.num_codes})")

    def one_hot(self) -> np.ndarray:
        self.validate()
        delta = np.zeros((len(self), self.num_codes), dtype=DTYPE)
        delta[np.arange(len(self)), self.indices] = 1.0
        return delta


@dataclass(frozen=True)
class VqLossTerms:
    codebook_loss: float
    commitment_loss: float
    beta: float = DEFAULT_BETA

    @property
    def total(self) -> float:
        return self.codebook_loss + self.beta * self.commitment_loss


def squared_distances(keys: np.ndarray, codewords: np.ndarray) -> np.ndarray:
    """Exact ``||k_i - c_j||^2`` table (L x N).

    Computed by explicit differences rather than the ``|k|^2 - 2kc + |c|^2``
    expansion so ties stay ties and the argmin matches a brute-force scan.
    """
    out = np.empty((keys.shape[0], codewords.shape[0]), dtype=DTYPE)
    for j in range(codewords.shape[0]):
        diff = keys - codewords[j]
        np.einsum("ij,ij->i", diff, diff, out=out[:, j])
    return out


def assign_nearest(keys, codebook: Codebook) -> Assignment:
    keys = as_matrix(keys, "keys")
    if codebook.size < 1:
        raise ParameterError("empty codebook")
    if keys.shape[1] != codebook.dim:
        raise ShapeError(f"key dim {keys.shape[1]} != codebook dim {codebook.dim}")
    # np.argmin returns the first minimum, i.e. the lowest index on ties
    idx = np.argmin(squared_distances(keys, codebook.codewords), axis=1)
    return Assignment(idx, codebook.size)


def quantize(keys, codebook: Codebook, assignment: Assignment) -> np.ndarray:
    """Reconstruct keys as ``delta @ C`` (a row gather)."""
    keys = np.asarray(keys)
    if len(assignment) != keys.shape[0]:
        raise ShapeError("assignment length does not match number of keys")
    if assignment.num_codes != codebook.size:
        raise CorruptionError("assignment was made against a different codebook size")
    assignment.validate()
    return codebook.codewords[assignment.indices]


def vq_loss(keys, quantized, beta: float = DEFAULT_BETA) -> VqLossTerms:
    keys = np.asarray(keys, dtype=DTYPE)
    quantized = np.asarray(quantized, dtype=DTYPE)
    if keys.shape != quantized.shape:
        raise ShapeError(f"shape mismatch {keys.shape} vs {quantized.shape}")
    if beta < 0:
        raise ParameterError("beta must be nonnegative")
    if keys.shape[0] == 0:
        return VqLossTerms(0.0, 0.0, beta)
    diff = keys - quantized
    sq = float(np.mean(np.einsum("ij,ij->i", diff, diff)))
    # same value; the two terms only route gradients differently
    return VqLossTerms(sq, sq, beta)


def update_codebook(codebook: Codebook, keys, assignment: Assignment, lr: float) -> Codebook:
    """One gradient step on the codebook loss, in place.

    Codeword ``j`` moves by ``lr * 2 * mean_{i in bucket j}(k_i - c_j)``.
    Unused codewords stay where they are. Usage counters accumulate.
    """
    if lr < 0:
        raise ParameterError("lr must be nonnegative")
    keys = np.asarray(keys, dtype=DTYPE)
    assignment.validate()
    counts = np.bincount(assignment.indices, minlength=codebook.size)
    codebook.usage += counts
    if lr == 0:
        return codebook
    sums = np.zeros_like(codebook.codewords)
    np.add.at(sums, assignment.indices, keys)
    used = counts > 0
    means = sums[used] / counts[used, None]
    codebook.codewords[used] += lr * 2.0 * (means - codebook.codewords[used])
    return codebook


def reinit_dead_codes(codebook: Codebook, keys, min_usage: int = 1, rng_seed: int = 0) -> Codebook:
    """Replace codewords used fewer than ``min_usage`` times by random keys; reset usage."""
    keys = as_matrix(keys, "keys")
    if keys.shape[0] == 0:
        raise ParameterError("need at least one key to reinitialize from")
    dead = np.flatnonzero(codebook.usage < min_usage)
    if dead.size:
        rng = np.random.default_rng(rng_seed)
        picks = rng.integers(keys.shape[0], size=dead.size)
        codebook.codewords[dead] = keys[picks]
    codebook.usage[:] = 0
    return codebook
