"""Dynamic time warping distance and a k-nearest-neighbour classifier on it."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

STEP_DISTANCES = ("jaccard_on_active_sets", "euclidean_on_dense")


@dataclass(frozen=True)
class DtwConfig:
    k_neighbors: int = 5
    step_distance: str = "jaccard_on_active_sets"
    window: Optional[int] = None

    def __post_init__(self):
        if self.k_neighbors < 1 or self.k_neighbors % 2 == 0:
            raise ValueError("k_neighbors must be a positive odd integer")
        if self.step_distance not in STEP_DISTANCES:
            raise ValueError(f"unknown step distance {self.step_distance!r}")
        if self.window is not None and self.window < 0:
            raise ValueError("window must be >= 0")


def _as_rows(a) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim == 1:
        a = a[:, None]
    if len(a) == 0:
        raise ValueError("empty sequence")
    return a


def jaccard_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise ``1 - |A & B| / |A | B|`` between rows treated as index sets."""
    out = np.empty((len(a), len(b)))
    sa = [set(r.tolist()) for r in a]
    sb = [set(r.tolist()) for r in b]
    for i, x in enumerate(sa):
        for j, y in enumerate(sb):
            inter = len(x & y)
            out[i, j] = 1.0 - inter / (len(x) + len(y) - inter)
    return out


def euclidean_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def cost_matrix(a, b, cfg: DtwConfig) -> np.ndarray:
    a, b = _as_rows(a), _as_rows(b)
    if cfg.step_distance == "jaccard_on_active_sets":
        return jaccard_cost(a, b)
    return euclidean_cost(a, b)


def accumulate(cost: np.ndarray, window: Optional[int] = None) -> float:
    """DTW recurrence over a precomputed cost matrix; cells outside the band are +inf."""
    n, m = cost.shape
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    for i in range(1, n + 1):
        lo, hi = 1, m
        if window is not None:
            lo, hi = max(1, i - window), min(m, i + window)
        for j in range(lo, hi + 1):
            D[i, j] = cost[i - 1, j - 1] + min(D[i - 1, j], D[i, j - 1], D[i - 1, j - 1])
    return float(D[n, m])


def dtw_distance(a, b, cfg: DtwConfig = DtwConfig()) -> float:
    """DTW distance between two sequences.

    For ``jaccard_on_active_sets`` rows are active-index sets (e.g. the
    ``(T, k)`` array of an encoded session); for ``euclidean_on_dense``
    rows are real vectors. 1-d inputs are treated as scalar sequences.
    """
    return accumulate(cost_matrix(a, b, cfg), cfg.window)


def _vote(dist: np.ndarray, labels: np.ndarray, k: int):
    nearest = np.argsort(dist, kind="stable")[:k]
    frac = float(labels[nearest].mean())
    return int(frac > 0.5), frac


def knn_predict(query, train: Sequence, labels, cfg: DtwConfig = DtwConfig()):
    """Majority label and fraud fraction among the ``k`` DTW-nearest sessions.

    Distance ties are broken by training-set position.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(train) < cfg.k_neighbors:
        raise ValueError(f"training set has {len(train)} sessions, need >= {cfg.k_neighbors}")
    dist = np.array([dtw_distance(query, t, cfg) for t in train])
    return _vote(dist, labels, cfg.k_neighbors)


# -- batched path for equal-width active-index sequences ------------------------

def _onehot(codes: np.ndarray, width: int) -> np.ndarray:
    n, T, k = codes.shape
    out = np.zeros((n, T, width), dtype=np.float32)
    np.put_along_axis(out.reshape(n * T, width), codes.reshape(n * T, k), 1.0, axis=1)
    return out


def dtw_jaccard_matrix(queries: np.ndarray, refs: np.ndarray, window: Optional[int] = None) -> np.ndarray:
    """DTW distances between every query and reference active-index sequence.

    ``queries`` is ``(Q, T1, k)`` and ``refs`` ``(N, T2, k)``; each row holds
    ``k`` distinct indices (one per domain), so ``|A | B| = 2k - |A & B|``.
    Produces the same values as :func:`dtw_distance` pair by pair.
    """
    Q, T1, k = queries.shape
    N, T2, _ = refs.shape
    width = int(max(queries.max(), refs.max())) + 1
    qh = _onehot(queries, width)
    rh = _onehot(refs, width).reshape(N * T2, width)
    # column-major DP state: prev[j] is the (Q, N) slab for reference step j
    prev = np.full((T2 + 1, Q, N), np.inf)
    prev[0] = 0.0
    for i in range(1, T1 + 1):
        inter = (qh[:, i - 1, :] @ rh.T).reshape(Q, N, T2).transpose(2, 0, 1).astype(np.float64)
        cost = 1.0 - inter / (2 * k - inter)
        cur = np.full((T2 + 1, Q, N), np.inf)
        lo, hi = 1, T2
        if window is not None:
            lo, hi = max(1, i - window), min(T2, i + window)
        for j in range(lo, hi + 1):
            cur[j] = cost[j - 1] + np.minimum(np.minimum(prev[j], cur[j - 1]), prev[j - 1])
        prev = cur
    return prev[T2]


def knn_scores(
    queries: np.ndarray,
    refs: np.ndarray,
    labels,
    cfg: DtwConfig = DtwConfig(),
    chunk: int = 16,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`knn_predict` for encoded sessions (Jaccard step distance).

    Returns ``(predicted_labels, fraud_fractions)``.
    """
    if cfg.step_distance != "jaccard_on_active_sets":
        raise ValueError("batched kNN supports the jaccard step distance only")
    labels = np.asarray(labels, dtype=np.int64)
    if len(refs) < cfg.k_neighbors:
        raise ValueError(f"training set has {len(refs)} sessions, need >= {cfg.k_neighbors}")
    starts = list(range(0, len(queries), chunk))

    def run(start):
        dist = dtw_jaccard_matrix(queries[start:start + chunk], refs, cfg.window)
        return [_vote(row, labels, cfg.k_neighbors) for row in dist]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    votes = [v for part in parts for v in part]
    return np.array([v[0] for v in votes]), np.array([v[1] for v in votes])
