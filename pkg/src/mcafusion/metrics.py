"""Embedding-space diagnostics and retrieval metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


def _pair(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2:
        raise InvalidInputError(f"mismatched embedding arrays {X.shape} vs {Y.shape}")
    return X, Y


def alignment(X, Y) -> float:
    """Mean squared distance between matched rows."""
    X, Y = _pair(X, Y)
    if len(X) == 0:
        raise InvalidInputError("alignment needs at least one pair")
    return float(((X - Y) ** 2).sum(axis=1).mean())


def uniformity(X, log: bool = False, chunk: int = 2048) -> float:
    """Mean of ``exp(-2 |x_i - x_j|^2)`` over ordered pairs ``i != j``.

    With ``log=True`` returns the logarithm of that mean.  Computed in row
    chunks so large sets never materialize the full distance matrix.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if X.ndim != 2 or n < 2:
        raise InvalidInputError("uniformity needs at least two embeddings")
    sq = (X * X).sum(axis=1)
    total = 0.0
    for start in range(0, n, chunk):
        rows = X[start : start + chunk]
        d2 = sq[start : start + chunk, None] + sq[None, :] - 2.0 * rows @ X.T
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-2.0 * d2)
        idx = np.arange(len(rows))
        k[idx, start + idx] = 0.0
        total += k.sum()
    value = total / (n * (n - 1))
    return float(np.log(value)) if log else float(value)


@dataclass(frozen=True)
class RankTable:
    ranks: np.ndarray  # 1-based, per query
    n: int

    def __len__(self) -> int:
        return len(self.ranks)


def rank_matrix(queries, keys) -> RankTable:
    """Rank of key ``i`` for query ``i`` under descending cosine similarity.

    Ties count against the match: any other key with similarity >= the
    matching one is ranked ahead of it.
    """
    Q, K = _pair(queries, keys)
    Q = Q / np.linalg.norm(Q, axis=1, keepdims=True)
    K = K / np.linalg.norm(K, axis=1, keepdims=True)
    sims = Q @ K.T
    diag = np.diagonal(sims)[:, None]
    ahead = (sims >= diag).sum(axis=1) - 1  # excludes the match itself
    return RankTable(ahead + 1, len(K))


def median_rank(table: RankTable) -> float:
    if len(table) == 0:
        raise InvalidInputError("empty rank table")
    return float(np.median(table.ranks))


def recall_at_k(table: RankTable, k: int) -> float:
    if len(table) == 0:
        raise InvalidInputError("empty rank table")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    return float((table.ranks <= k).mean())
