"""Privacy primitives: zero-sum secure aggregation, Gram-preserving
data masking, and the randomized-encoding mask for mean recovery.

Three constructions, all semi-honest:

* zero-sum masking lets parties reveal only a sum: pairwise seeded
  PRG draws are added by one party and subtracted by the other, so the
  masks cancel exactly over the full set;
* the lifting mask sends each party's data through ``X @ L @ S`` with a
  shared basis ``M``, hiding rows and feature dimension while leaving
  every pairwise Gram product ``X_p X_q^T`` intact;
* the encoding mask ``C`` hides an intermediate matrix product from
  the parties that apply it; the recipient strips it with ``C^{-1}``.

Mask draws are quantized to integer multiples of 2^-30 so partial sums
stay exact in double precision and full cancellation is bit-exact for
up to 64 parties.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import FactorizationError
from .seeds import derive_rng

logger = logging.getLogger(__name__)

__all__ = [
    "MaskBasis",
    "MaskedMatrix",
    "GramBlocks",
    "ZeroSumMaskSet",
    "EncodingMask",
    "gen_mask_basis",
    "left_inverse",
    "psd_sqrt",
    "mask_data",
    "gram_from_masked",
    "make_zero_sum_masks",
    "party_mask",
    "secure_sum",
    "gen_encoding_mask",
    "split_columns",
]

# zero-sum draws: uniform dyadic rationals k * 2^-30 with |value| <= MASK_BOUND
MASK_BOUND = 1e3
_MASK_QUANTUM = 2.0**-30
_MASK_LIMIT = int(MASK_BOUND) << 30

COND_LIMIT = 1e6
ENCODING_ATTEMPTS = 16
BASIS_ATTEMPTS = 16


# ---------------------------------------------------------------------------
# Lifting mask (shared basis)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskBasis:
    """Shared full-column-rank basis lifting width-P rows into R^d."""

    m: np.ndarray
    seed: int = 0
    retries: int = 0

    def __post_init__(self):
        m = np.ascontiguousarray(self.m, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] <= m.shape[1]:
            raise ValueError(f"basis must be d x P with d > P, got {m.shape}")
        if np.linalg.matrix_rank(m) != m.shape[1]:
            raise ValueError("basis is rank-deficient")
        object.__setattr__(self, "m", m)

    @property
    def d(self) -> int:
        return self.m.shape[0]

    @property
    def width(self) -> int:
        return self.m.shape[1]


@dataclass(frozen=True)
class MaskedMatrix:
    """Lifted rows of one party; column count is always d, never P."""

    rows: np.ndarray
    owner: int

    def __post_init__(self):
        rows = np.ascontiguousarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("masked rows must be 2-d")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "owner", int(self.owner))

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


def gen_mask_basis(seed: int, width: int, d: int) -> MaskBasis:
    """Seeded standard-normal basis, regenerated until full column rank.

    Deterministic given ``seed``; the retry count is carried on the
    result so regeneration is reproducible and observable.
    """
    if d <= width:
        raise ValueError(f"lifted dimension d={d} must exceed width={width}")
    for attempt in range(BASIS_ATTEMPTS):
        m = derive_rng(seed, "mask-basis", attempt).standard_normal((d, width))
        if np.linalg.matrix_rank(m) == width:
            if attempt:
                logger.info("mask basis needed %d regeneration(s)", attempt)
            return MaskBasis(m=m, seed=seed, retries=attempt)
    raise FactorizationError(
        f"no full-rank {d}x{width} basis after {BASIS_ATTEMPTS} attempts"
    )


def left_inverse(basis: MaskBasis) -> np.ndarray:
    """Moore-Penrose left inverse (M^T M)^-1 M^T; L @ M = I."""
    m = basis.m
    return np.linalg.solve(m.T @ m, m.T)


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric PSD matrix via eigen-decomposition."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("input must be square")
    if a.size and np.max(np.abs(a - a.T)) > 1e-9:
        raise ValueError("input is not symmetric")
    vals, vecs = np.linalg.eigh(a)
    if vals.size and vals.min() < -1e-9:
        raise ValueError(f"input is not PSD (min eigenvalue {vals.min():g})")
    root = vecs * np.sqrt(np.maximum(vals, 0.0)) @ vecs.T
    return (root + root.T) / 2.0


def mask_data(x: np.ndarray, l_inv: np.ndarray, s_root: np.ndarray, owner: int = 0) -> MaskedMatrix:
    """Lift ``x`` (n x P) into n x d masked rows via x @ L @ S.

    Because L @ M = I and S @ S = M @ M^T, products of masked matrices
    reproduce plaintext Grams: (X_p L S)(X_q L S)^T = X_p X_q^T.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("data must be 2-d")
    if l_inv.shape[0] != x.shape[1] or s_root.shape[0] != l_inv.shape[1]:
        raise ValueError(
            f"shape mismatch: data {x.shape}, left inverse {l_inv.shape}, root {s_root.shape}"
        )
    return MaskedMatrix(rows=x @ l_inv @ s_root, owner=owner)


@dataclass(frozen=True)
class GramBlocks:
    """All pairwise Gram blocks of a set of masked matrices.

    Stores the assembled Gram of the stacked rows together with the
    owner layout; pair blocks and the source/target views are slices.
    """

    owners: tuple
    counts: tuple
    gram: np.ndarray

    def __post_init__(self):
        if len(self.owners) != len(self.counts):
            raise ValueError("owners and counts must align")
        n = int(sum(self.counts))
        if self.gram.shape != (n, n):
            raise ValueError("assembled Gram has wrong shape")

    def _slice(self, owner: int) -> slice:
        start = 0
        for o, c in zip(self.owners, self.counts):
            if o == owner:
                return slice(start, start + c)
            start += c
        raise KeyError(f"no rows for owner {owner}")

    def block(self, p: int, q: int) -> np.ndarray:
        """Gram block X_p @ X_q^T by owner ids."""
        return self.gram[self._slice(p), self._slice(q)]

    def views(self, source_owners: Sequence[int], target_owner: int):
        """(G_SS, G_ST, G_TT) with sources stacked in the given order."""
        idx = []
        for o in source_owners:
            s = self._slice(o)
            idx.extend(range(s.start, s.stop))
        t = self._slice(target_owner)
        tidx = list(range(t.start, t.stop))
        g_ss = self.gram[np.ix_(idx, idx)]
        g_st = self.gram[np.ix_(idx, tidx)]
        g_tt = self.gram[np.ix_(tidx, tidx)]
        return g_ss, g_st, g_tt


def gram_from_masked(parts: Sequence[MaskedMatrix]) -> GramBlocks:
    """Assemble every pairwise Gram block from lifted data.

    All parts must share the lifted dimension d (same basis seed);
    owners must be distinct.  The result equals the plaintext Grams of
    the unmasked rows up to factorization round-off.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("no masked matrices")
    d = parts[0].d
    owners = [p.owner for p in parts]
    if len(set(owners)) != len(owners):
        raise ValueError("duplicate owner ids")
    for p in parts[1:]:
        if p.d != d:
            raise ValueError(f"mismatched lifted dimension: {p.d} != {d}")
    stacked = np.concatenate([p.rows for p in parts], axis=0)
    return GramBlocks(
        owners=tuple(owners),
        counts=tuple(p.n_rows for p in parts),
        gram=stacked @ stacked.T,
    )


# ---------------------------------------------------------------------------
# Zero-sum secure aggregation
# ---------------------------------------------------------------------------


def _dyadic_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws on the 2^-30 lattice within [-MASK_BOUND, MASK_BOUND].

    Lattice values and their partial sums over <= 64 parties are exactly
    representable in float64, which is what makes cancellation bit-exact.
    """
    return rng.integers(-_MASK_LIMIT, _MASK_LIMIT + 1, size=shape).astype(np.float64) * _MASK_QUANTUM


@dataclass(frozen=True)
class ZeroSumMaskSet:
    """Per-party additive masks that cancel exactly when all are summed."""

    shape: tuple
    masks: Mapping[int, np.ndarray] = field(repr=False)

    def mask_for(self, party: int) -> np.ndarray:
        return self.masks[party]

    def apply(self, party: int, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.shape:
            raise ValueError(f"value shape {value.shape} != mask shape {self.shape}")
        return value + self.masks[party]


def make_zero_sum_masks(
    party_ids: Sequence[int],
    pairwise_seeds: Mapping[tuple, int],
    shape,
) -> ZeroSumMaskSet:
    """Build masks from pairwise seeds: each pair's shared draw is added
    by the lower-id party and subtracted by the higher-id one, so the
    total over all parties is exactly zero.
    """
    ids = list(party_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate party ids")
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    masks = {i: np.zeros(shape) for i in ids}
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = sorted((ids[a], ids[b]))
            key = (i, j)
            if key not in pairwise_seeds:
                raise KeyError(f"missing seed for party pair {key}")
            draw = _dyadic_uniform(np.random.default_rng(pairwise_seeds[key]), shape)
            masks[i] = masks[i] + draw
            masks[j] = masks[j] - draw
    return ZeroSumMaskSet(shape=shape, masks=masks)


def party_mask(party: int, pair_seeds: Mapping[int, int], shape) -> np.ndarray:
    """One party's own zero-sum mask from the pair seeds it holds.

    ``pair_seeds`` maps each peer id to the seed shared with that peer.
    The lower-id side of every pair adds the shared draw and the higher
    side subtracts it, matching :func:`make_zero_sum_masks` exactly, so
    parties can mask independently without a trusted assembler.
    """
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    mask = np.zeros(shape)
    for peer in sorted(pair_seeds):
        if peer == party:
            raise ValueError("a party cannot share a pair seed with itself")
        draw = _dyadic_uniform(np.random.default_rng(pair_seeds[peer]), shape)
        mask = mask + draw if party < peer else mask - draw
    return mask


def secure_sum(masked_values: Sequence[np.ndarray]) -> np.ndarray:
    """Sum of masked contributions; mask terms cancel, leaving the data sum."""
    values = [np.asarray(v, dtype=np.float64) for v in masked_values]
    if not values:
        raise ValueError("nothing to sum")
    shape = values[0].shape
    for v in values[1:]:
        if v.shape != shape:
            raise ValueError(f"shape mismatch: {v.shape} != {shape}")
    total = values[0].copy()
    for v in values[1:]:
        total += v
    return total


# ---------------------------------------------------------------------------
# Randomized encoding mask
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncodingMask:
    """Condition-checked invertible mask C and its inverse."""

    c: np.ndarray
    c_inv: np.ndarray
    seed: int
    attempts: int = 0

    def __post_init__(self):
        n = self.c.shape[0]
        if self.c.shape != (n, n) or self.c_inv.shape != (n, n):
            raise ValueError("mask and inverse must be square and matching")
        if np.max(np.abs(self.c @ self.c_inv - np.eye(n))) > 1e-8:
            raise ValueError("inverse check failed")


def gen_encoding_mask(seed: int, n_t: int) -> EncodingMask:
    """Standard-normal invertible mask with condition number <= 1e6.

    Ill-conditioned draws are regenerated from an incremented sub-seed;
    exceeding the attempt bound is a hard failure.
    """
    if n_t < 1:
        raise ValueError("mask size must be >= 1")
    for attempt in range(ENCODING_ATTEMPTS):
        c = derive_rng(seed, "encoding", attempt).standard_normal((n_t, n_t))
        cond = np.linalg.cond(c)
        if np.isfinite(cond) and cond <= COND_LIMIT:
            if attempt:
                logger.info("encoding mask needed %d regeneration(s)", attempt)
            return EncodingMask(c=c, c_inv=np.linalg.inv(c), seed=seed, attempts=attempt)
    raise FactorizationError(
        f"no well-conditioned {n_t}x{n_t} mask after {ENCODING_ATTEMPTS} attempts"
    )


def split_columns(a: np.ndarray, counts: Sequence[int]) -> list:
    """Contiguous column blocks in party order; concatenation restores ``a``."""
    a = np.asarray(a, dtype=np.float64)
    counts = [int(c) for c in counts]
    if sum(counts) != a.shape[1]:
        raise ValueError(f"column counts {counts} do not sum to {a.shape[1]}")
    out, start = [], 0
    for c in counts:
        out.append(a[:, start : start + c])
        start += c
    return out
