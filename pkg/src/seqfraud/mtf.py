"""Markov transition fields over the active indices of consecutive events."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .encoder import EncodedSession


@dataclass(frozen=True)
class TransitionField:
    m: np.ndarray
    counts: np.ndarray

    @property
    def l(self) -> int:
        return self.m.shape[0]


def _active(s) -> np.ndarray:
    if isinstance(s, EncodedSession):
        return s.active
    return np.asarray(s, dtype=np.int64)


def transition_counts(active: np.ndarray, l: int, exclude: Optional[Iterable[int]] = None) -> np.ndarray:
    """Count index pairs ``(p, q)`` with ``p`` active at step t and ``q`` at t+1.

    Pairs whose endpoints both lie in ``exclude`` (the pad indices) are skipped.
    """
    src = active[:-1]
    dst = active[1:]
    k_src, k_dst = src.shape[1], dst.shape[1]
    p = np.repeat(src[:, :, None], k_dst, axis=2).ravel()
    q = np.repeat(dst[:, None, :], k_src, axis=1).ravel()
    if exclude:
        skip = np.zeros(l, dtype=bool)
        skip[list(exclude)] = True
        keep = ~(skip[p] & skip[q])
        p, q = p[keep], q[keep]
    return np.bincount(p * l + q, minlength=l * l).reshape(l, l)


def build_mtf(
    s,
    l: int,
    exclude: Optional[Iterable[int]] = None,
    smoothing: float = 0.0,
) -> TransitionField:
    """Row-stochastic transition field of an encoded session.

    ``s`` is an :class:`EncodedSession` or a ``(T, k)`` array of active
    indices. Rows without outgoing transitions stay zero unless
    ``smoothing > 0`` adds that pseudo-count to every cell first.
    """
    active = _active(s)
    if active.ndim != 2 or len(active) < 2:
        raise ValueError("sequence too short for transitions")
    if active.size and (active.min() < 0 or active.max() >= l):
        raise ValueError(f"active index outside [0, {l})")
    counts = transition_counts(active, l, exclude)
    weights = counts.astype(np.float64)
    if smoothing > 0:
        weights = weights + smoothing
    rows = weights.sum(axis=1, keepdims=True)
    m = np.divide(weights, rows, out=np.zeros_like(weights), where=rows > 0)
    return TransitionField(m, counts)


def batch_mtf(
    sessions: Sequence,
    l: int,
    exclude: Optional[Iterable[int]] = None,
    smoothing: float = 0.0,
    workers: int = 1,
) -> np.ndarray:
    """Stack per-session fields into an ``(n, l, l)`` tensor in input order."""
    exclude = frozenset(exclude or ())

    def one(pair):
        i, s = pair
        try:
            return build_mtf(s, l, exclude, smoothing).m
        except ValueError as exc:
            raise ValueError(f"session {i}: {exc}") from exc

    out = np.zeros((len(sessions), l, l))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, m in enumerate(pool.map(one, enumerate(sessions))):
                out[i] = m
    else:
        for i, pair in enumerate(enumerate(sessions)):
            out[i] = one(pair)
    return out


def format_field(tf: TransitionField) -> str:
    """Row-major text grid with 9 significant digits."""
    return "".join(" ".join(f"{v:.9g}" for v in row) + "\n" for row in tf.m)


def dump_field(tf: TransitionField, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_field(tf))
