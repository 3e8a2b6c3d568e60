#!/usr/bin/env python3
"""
Positional machinery: T5 bucketing, the RP bias table with its special-token
cases, rotary embeddings, learned AP tables and AP position shifting
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from core.errors import ConfigError, PositionError, ShapeError
from core.numerics import gather_rows, make_op, take


# ============================================================================
# POSITIONS
# ============================================================================

@dataclass(frozen=True)
class Positions:
    """Absolute position ids of one document after shifting by k"""

    ids: np.ndarray
    shift: int = 0

    @classmethod
    def assign(cls, n, shift=0, max_positions=None):
        if max_positions is not None and shift + n > max_positions:
            raise PositionError(f"positions {shift}..{shift + n - 1} exceed table size {max_positions}")
        return cls(np.arange(shift, shift + n, dtype=np.int64), int(shift))

    def __len__(self):
        return len(self.ids)


def sample_ap_shift(n, m, rng):
    """
    Draw the AP shift k uniformly from the inclusive range [0, m - n]
    Parameters:
        n: document length
        m: maximum positions of the AP table
        rng: numpy Generator
    """
    if n > m:
        raise PositionError(f"document length {n} exceeds maximum positions {m}")
    return int(rng.integers(0, m - n + 1))


# ============================================================================
# T5 BUCKETS
# ============================================================================

def t5_bucket(rel, num_buckets=32, max_distance=128):
    """
    Bidirectional T5 bucket of a signed offset rel = i - j

    Half of the buckets serve each sign. Within a half, offsets below
    half/2 get their own bucket, larger ones share logarithmically wider
    buckets up to max_distance, and everything beyond lands in the last one.
    """
    half = num_buckets // 2
    max_exact = half // 2
    if max_exact < 1 or max_distance <= max_exact:
        raise ConfigError(f"t5_bucket needs num_buckets >= 4 and max_distance > num_buckets // 4, "
                          f"got num_buckets={num_buckets} max_distance={max_distance}")
    bucket = half if rel > 0 else 0
    distance = abs(int(rel))
    if distance < max_exact:
        return bucket + distance
    scaled = math.log(distance / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
    return bucket + min(max_exact + int(scaled), half - 1)


@lru_cache(maxsize=16)
def _bucket_lookup(num_buckets, max_distance, reach):
    """Bucket ids for rel in [-reach, reach], indexed by rel + reach"""
    return np.array(
        [t5_bucket(rel, num_buckets, max_distance) for rel in range(-reach, reach + 1)],
        dtype=np.int64,
    )


def bucket_matrix(rel, num_buckets=32, max_distance=128):
    """t5_bucket over an integer array of offsets"""
    rel = np.asarray(rel, dtype=np.int64)
    # beyond max_distance every offset shares the overflow bucket of its sign
    reach = max_distance + 1
    lookup = _bucket_lookup(num_buckets, max_distance, reach)
    return lookup[np.clip(rel, -reach, reach) + reach]


# ============================================================================
# RP BIAS TABLE
# ============================================================================

@dataclass
class RPBiasTable:
    """
    Per-head RP parameters of one layer

    params is a Tensor[n_heads x (num_buckets + 3)]: the bucket biases
    followed by the three distance-agnostic special-token scalars.
    """

    params: object
    num_buckets: int = 32
    max_distance: int = 128

    @property
    def both_special_col(self):
        return self.num_buckets

    @property
    def key_special_col(self):
        return self.num_buckets + 1

    @property
    def query_special_col(self):
        return self.num_buckets + 2

    @property
    def n_heads(self):
        return self.params.shape[0]

    def buckets(self, head):
        return self.params.data[head, :self.num_buckets]

    def index_matrix(self, special_mask, positions=None):
        """
        Column of params used for every (query i, key j) pair
        Cases are checked in order: both special, key special, query special,
        then the bucket of i - j.
        """
        special_mask = np.asarray(special_mask, dtype=bool)
        n = special_mask.shape[0]
        pos = np.arange(n, dtype=np.int64) if positions is None else np.asarray(positions, dtype=np.int64)
        if pos.shape != (n,):
            raise ShapeError(f"positions length {pos.shape} != {n} tokens")
        index = bucket_matrix(pos[:, None] - pos[None, :], self.num_buckets, self.max_distance)
        query_special = special_mask[:, None] & ~special_mask[None, :]
        key_special = special_mask[None, :] & ~special_mask[:, None]
        both = special_mask[:, None] & special_mask[None, :]
        index = np.where(query_special, self.query_special_col, index)
        index = np.where(key_special, self.key_special_col, index)
        return np.where(both, self.both_special_col, index)

    def bias(self, head, special_mask, positions=None):
        """Differentiable RP bias matrix b^h for one head"""
        width = self.params.shape[1]
        return take(self.params, head * width + self.index_matrix(special_mask, positions))


def rp_bias_matrix(n, special_index_set, head, table, positions=None):
    """
    RP bias matrix b^h of an n-token sequence
    Parameters:
        n: sequence length
        special_index_set: indices of [CLS]/[SEP] tokens
        head: attention head
        table: RPBiasTable
        positions: optional absolute ids (only their differences matter)
    Returns:
        numpy matrix[n x n]
    """
    special_mask = np.zeros(n, dtype=bool)
    special = list(special_index_set)
    if special and (min(special) < 0 or max(special) >= n):
        raise PositionError(f"special indices {sorted(special)} outside [0, {n})")
    special_mask[special] = True
    return table.bias(head, special_mask, positions).data


# ============================================================================
# ROPE
# ============================================================================

def _rope_angles(positions, d_head, base):
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.concatenate([np.cos(angles)] * 2, axis=1), np.concatenate([np.sin(angles)] * 2, axis=1)


def apply_rope(x, positions, base=10000.0):
    """
    Rotate query or key rows by their positions (half-split pairing)
    Parameters:
        x: Tensor[n x d_head], d_head even
        positions: n absolute position ids
        base: frequency base
    """
    n, d_head = x.shape
    if d_head % 2:
        raise ShapeError(f"apply_rope needs an even head width, got {d_head}")
    if len(positions) != n:
        raise ShapeError(f"apply_rope: {len(positions)} positions for {n} rows")
    cos, sin = _rope_angles(positions, d_head, base)
    cos, sin = cos.astype(x.data.dtype), sin.astype(x.data.dtype)
    half = d_head // 2
    x_data = x.data
    rotated = np.concatenate([-x_data[:, half:], x_data[:, :half]], axis=1)

    def _backward(g):
        gs = g * sin
        return (g * cos + np.concatenate([gs[:, half:], -gs[:, :half]], axis=1),)

    return make_op(x_data * cos + rotated * sin, (x,), _backward)


# ============================================================================
# AP EMBEDDING
# ============================================================================

@dataclass
class APEmbedding:
    """Learned absolute position table, Tensor[m x d]"""

    table: object

    @property
    def max_positions(self):
        return self.table.shape[0]


def ap_lookup(embedding, positions):
    """
    Gather AP rows for the given position ids
    Parameters:
        embedding: APEmbedding
        positions: Positions or int sequence
    """
    ids = positions.ids if isinstance(positions, Positions) else np.asarray(positions, dtype=np.int64)
    m = embedding.max_positions
    if ids.size and (ids.min() < 0 or ids.max() >= m):
        raise PositionError(f"position id out of range [0, {m}): {int(ids.min())}..{int(ids.max())}")
    return gather_rows(embedding.table, ids)
