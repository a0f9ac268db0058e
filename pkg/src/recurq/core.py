"""Core quantization math: hard/soft assignment, the shared-codebook
recurrence, reconstruction, and code packing.

All operations here are pure functions over immutable inputs. Distances are
computed in float64; argmin ties break toward the smallest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """Invalid input to a quantization operation."""


def _as_matrix(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DomainError(f"{name} must be a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite entries")
    return a


def _as_vector(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise DomainError(f"{name} must be a 1-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite entries")
    return a


@dataclass
class FeatureMatrix:
    """N x D row-major feature set with optional integer labels.

    ``labels`` holds one class id per row; ``multi_labels`` holds a set of
    label ids per row for multi-label data.
    """

    data: np.ndarray
    labels: np.ndarray | None = None
    multi_labels: list[frozenset[int]] | None = None

    def __post_init__(self):
        self.data = _as_matrix(self.data, "data")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DomainError("feature matrix must be at least 1x1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.data.shape[0],):
                raise DomainError("labels length must match number of rows")
        if self.multi_labels is not None:
            if len(self.multi_labels) != self.data.shape[0]:
                raise DomainError("multi_labels length must match number of rows")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def label_sets(self) -> list[frozenset[int]]:
        """Per-row label sets, derived from multi_labels or labels."""
        if self.multi_labels is not None:
            return [frozenset(s) for s in self.multi_labels]
        if self.labels is None:
            raise DomainError("feature matrix has no labels")
        return [frozenset((int(l),)) for l in self.labels]


@dataclass(frozen=True)
class RqModel:
    """Trained quantizer: one K x D codebook shared across ``levels``
    recurrence steps, shrunk by ``scale`` at each step.

    Parameter count is K*D + 1 regardless of the level count.
    """

    codebook: np.ndarray
    scale: float
    gamma: float
    levels: int

    def __post_init__(self):
        cb = _as_matrix(self.codebook, "codebook")
        object.__setattr__(self, "codebook", cb)
        cb.setflags(write=False)
        k = cb.shape[0]
        if k < 1 or (k & (k - 1)) != 0:
            raise DomainError(f"codebook size {k} must be a power of two")
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise DomainError("scale must be finite and positive")
        if not np.isfinite(self.gamma) or self.gamma <= 0:
            raise DomainError("gamma must be finite and positive")
        if self.levels < 1:
            raise DomainError("levels must be >= 1")

    @property
    def k(self) -> int:
        return self.codebook.shape[0]

    @property
    def dim(self) -> int:
        return self.codebook.shape[1]

    @property
    def bits_per_level(self) -> int:
        return self.k.bit_length() - 1

    @property
    def code_bits(self) -> int:
        return self.levels * self.bits_per_level

    @property
    def param_count(self) -> int:
        return self.k * self.dim + 1

    def with_levels(self, levels: int) -> "RqModel":
        return RqModel(self.codebook, self.scale, self.gamma, levels)

    def scaled_codebook(self, level: int) -> np.ndarray:
        """Codebook used at 1-based recurrence level ``level``."""
        return self.scale ** (level - 1) * self.codebook


@dataclass(frozen=True)
class SoftAssignment:
    """Softmax codeword weights and the resulting convex combination."""

    probs: np.ndarray
    expected: np.ndarray


@dataclass(frozen=True)
class CodeSequence:
    """Per-level sub-indices for one vector; a length-m prefix is itself a
    valid code for an m-level model."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.shape[0] < 1:
            raise DomainError("code sequence must be a nonempty 1-D index vector")
        if np.any(idx < 0):
            raise DomainError("sub-indices must be nonnegative")
        object.__setattr__(self, "indices", idx)
        idx.setflags(write=False)

    def __len__(self) -> int:
        return self.indices.shape[0]


@dataclass
class QuantTrace:
    """Per-level state of one encode pass.

    ``states`` rows are the residuals h^0..h^M (h^0 is the input);
    ``hard_partials``/``soft_partials`` are the per-level selected and
    blended codewords; the error vectors measure partial reconstructions
    against the original input.
    """

    states: np.ndarray
    hard_partials: np.ndarray
    soft_partials: np.ndarray
    per_level_hard_err: np.ndarray
    per_level_soft_err: np.ndarray
    probs: np.ndarray = field(repr=False, default=None)


def hard_quantize(x, codebook) -> tuple[int, np.ndarray]:
    """Nearest codeword by Euclidean distance; ties go to the smaller index."""
    x = _as_vector(x, "x")
    cb = _as_matrix(codebook, "codebook")
    if cb.shape[1] != x.shape[0]:
        raise DomainError("dimension mismatch between x and codebook")
    diff = cb - x
    idx = int(np.argmin(np.einsum("kd,kd->k", diff, diff)))
    return idx, cb[idx].copy()


def soft_quantize(x, codebook, gamma: float) -> SoftAssignment:
    """Softmax-weighted convex combination of codewords.

    Weights are exp(-gamma * ||C_k - x||) normalized over k, computed with
    max-subtraction in the exponent for stability at large gamma.
    """
    x = _as_vector(x, "x")
    cb = _as_matrix(codebook, "codebook")
    if not np.isfinite(gamma) or gamma <= 0:
        raise DomainError("gamma must be finite and positive")
    if cb.shape[1] != x.shape[0]:
        raise DomainError("dimension mismatch between x and codebook")
    dists = np.linalg.norm(cb - x, axis=1)
    logits = -gamma * dists
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return SoftAssignment(probs=probs, expected=probs @ cb)


def encode(x, model: RqModel) -> tuple[CodeSequence, QuantTrace]:
    """Greedy recurrent encoding: at each level quantize the current residual
    against the scaled codebook, subtract the selected codeword, and shrink
    the codebook by the scale factor for the next level."""
    x = _as_vector(x, "x")
    if x.shape[0] != model.dim:
        raise DomainError("input dimension does not match model")
    m_levels, d, k = model.levels, model.dim, model.k
    states = np.empty((m_levels + 1, d))
    hard_partials = np.empty((m_levels, d))
    soft_partials = np.empty((m_levels, d))
    probs = np.empty((m_levels, k))
    hard_err = np.empty(m_levels)
    soft_err = np.empty(m_levels)
    indices = np.empty(m_levels, dtype=np.int64)

    states[0] = x
    h = x.copy()
    hard_sum = np.zeros(d)
    soft_sum = np.zeros(d)
    for m in range(1, m_levels + 1):
        scaled = model.scaled_codebook(m)
        idx, codeword = hard_quantize(h, scaled)
        soft = soft_quantize(h, scaled, model.gamma)
        indices[m - 1] = idx
        hard_partials[m - 1] = codeword
        soft_partials[m - 1] = soft.expected
        probs[m - 1] = soft.probs
        hard_sum += codeword
        soft_sum += soft.expected
        hard_err[m - 1] = np.linalg.norm(hard_sum - x)
        soft_err[m - 1] = np.linalg.norm(soft_sum - x)
        h = h - codeword
        states[m] = h

    trace = QuantTrace(
        states=states,
        hard_partials=hard_partials,
        soft_partials=soft_partials,
        per_level_hard_err=hard_err,
        per_level_soft_err=soft_err,
        probs=probs,
    )
    return CodeSequence(indices), trace


def encode_batch(data, model: RqModel) -> np.ndarray:
    """Vectorized hard-path encoding of an N x D matrix; returns N x M codes."""
    x = _as_matrix(data, "data") if np.ndim(data) == 2 else np.asarray(data)
    if x.shape[1] != model.dim:
        raise DomainError("input dimension does not match model")
    n = x.shape[0]
    codes = np.empty((n, model.levels), dtype=np.int64)
    h = x.astype(np.float64, copy=True)
    for m in range(1, model.levels + 1):
        scaled = model.scaled_codebook(m)
        # squared distances: ranks match the Euclidean argmin exactly
        d2 = (
            np.einsum("nd,nd->n", h, h)[:, None]
            - 2.0 * h @ scaled.T
            + np.einsum("kd,kd->k", scaled, scaled)[None, :]
        )
        idx = np.argmin(d2, axis=1)
        codes[:, m - 1] = idx
        h -= scaled[idx]
    return codes


def reconstruct_hard(codes: CodeSequence, model: RqModel, m: int) -> np.ndarray:
    """Prefix reconstruction from the first ``m`` sub-indices."""
    if not 1 <= m <= len(codes):
        raise DomainError(f"level {m} out of range for {len(codes)}-level codes")
    idx = codes.indices[:m]
    if np.any(idx >= model.k):
        raise DomainError("sub-index out of range for model codebook")
    weights = model.scale ** np.arange(m)
    return weights @ model.codebook[idx]


def reconstruct_soft(trace: QuantTrace, m: int) -> np.ndarray:
    """Sum of the first ``m`` soft partial reconstructions of a trace."""
    if not 1 <= m <= trace.soft_partials.shape[0]:
        raise DomainError(f"level {m} out of range for trace")
    return trace.soft_partials[:m].sum(axis=0)


def _bits_for_k(k: int) -> int:
    if k < 2 or (k & (k - 1)) != 0:
        raise DomainError(f"K={k} must be a power of two >= 2")
    return k.bit_length() - 1


def packed_size(m: int, k: int) -> int:
    """Bytes occupied by an m-level code at codebook size k."""
    return (m * _bits_for_k(k) + 7) // 8


def pack_codes(codes: CodeSequence, k: int) -> bytes:
    """Pack sub-indices MSB-first into a byte string; the final partial byte
    is zero-padded in its low bits."""
    bits = _bits_for_k(k)
    idx = codes.indices
    if np.any(idx >= k):
        raise DomainError("sub-index out of range for K")
    total_bits = len(codes) * bits
    nbytes = (total_bits + 7) // 8
    value = 0
    for i in idx:
        value = (value << bits) | int(i)
    value <<= nbytes * 8 - total_bits
    return value.to_bytes(nbytes, "big")


def unpack_codes(data: bytes, m: int, k: int) -> CodeSequence:
    """Inverse of :func:`pack_codes` for an m-level code."""
    bits = _bits_for_k(k)
    nbytes = (m * bits + 7) // 8
    if len(data) != nbytes:
        raise DomainError(f"expected {nbytes} packed bytes, got {len(data)}")
    value = int.from_bytes(data, "big") >> (nbytes * 8 - m * bits)
    mask = k - 1
    indices = [(value >> (bits * (m - 1 - i))) & mask for i in range(m)]
    return CodeSequence(np.array(indices, dtype=np.int64))


def slice_prefix(codes: CodeSequence, m: int) -> CodeSequence:
    """First ``m`` sub-indices; identical to encoding with an m-level model."""
    if not 1 <= m <= len(codes):
        raise DomainError(f"prefix length {m} out of range")
    return CodeSequence(codes.indices[:m].copy())
