"""Segment one-hot encoding of events and skip-gram item embeddings.

Every domain ``d`` owns a half-open index range ``[a_d, b_d)`` of the global
one-hot layout.  Inside a segment, offset 0 is the pad value, offsets
``1..|vocab|`` the vocabulary in schema order and the last offset the
out-of-vocabulary value.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .events import DataError, DatasetSchema, Event, Session, pad_or_truncate


@dataclass(frozen=True)
class SegmentMap:
    segments: tuple[tuple[str, int, int], ...]
    total_width: int
    vocabularies: tuple[tuple[str, ...], ...]
    pad_token: str
    oov_token: str
    _lookup: tuple[dict, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        lookups = tuple(
            {v: i + 1 for i, v in enumerate(vocab)} for vocab in self.vocabularies
        )
        object.__setattr__(self, "_lookup", lookups)

    @property
    def k(self) -> int:
        return len(self.segments)

    @property
    def pad_indices(self) -> frozenset:
        return frozenset(a for _, a, _ in self.segments)

    def index(self, domain_pos: int, value: str) -> int:
        _, a, b = self.segments[domain_pos]
        if value == self.pad_token:
            return a
        return a + self._lookup[domain_pos].get(value, b - a - 1)

    def fingerprint(self) -> str:
        payload = json.dumps(
            [self.segments, self.vocabularies, self.pad_token, self.oov_token],
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class EncodedEvent:
    active: tuple[int, ...]


@dataclass(frozen=True)
class EncodedSession:
    """``active`` is a ``(T, k)`` integer array of global one-hot indices."""

    active: np.ndarray
    item_ids: tuple[Optional[str], ...]
    label: Optional[int] = None

    @property
    def events(self) -> list[EncodedEvent]:
        return [EncodedEvent(tuple(int(i) for i in row)) for row in self.active]

    def __len__(self):
        return len(self.active)


def build_segment_map(schema: DatasetSchema) -> SegmentMap:
    segments = []
    start = 0
    for d in schema.domains:
        width = len(d.vocab) + 2
        segments.append((d.name, start, start + width))
        start += width
    return SegmentMap(
        segments=tuple(segments),
        total_width=start,
        vocabularies=tuple(d.vocab for d in schema.domains),
        pad_token=schema.pad_token,
        oov_token=schema.oov_token,
    )


def encode_event(e: Event, m: SegmentMap) -> EncodedEvent:
    values = dict(e.features)
    return EncodedEvent(
        tuple(m.index(pos, values[name]) for pos, (name, _, _) in enumerate(m.segments))
    )


def encode_session(s: Session, m: SegmentMap) -> EncodedSession:
    active = np.array([encode_event(e, m).active for e in s.events], dtype=np.int64)
    return EncodedSession(active, tuple(e.item_id for e in s.events), s.label)


# -- skip-gram item embeddings ------------------------------------------------

EMB_MAGIC = b"SQFEMB\x00\x00"
EMB_VERSION = 1


@dataclass
class EmbeddingTable:
    vectors: dict
    d_emb: int

    def lookup(self, token: Optional[str]) -> np.ndarray:
        v = self.vectors.get(token) if token is not None else None
        if v is None:
            return np.zeros(self.d_emb)
        return v

    def to_bytes(self) -> bytes:
        parts = [EMB_MAGIC, struct.pack("<III", EMB_VERSION, self.d_emb, len(self.vectors))]
        for token, vec in self.vectors.items():
            raw = token.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(np.asarray(vec, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingTable":
        if data[:8] != EMB_MAGIC:
            raise DataError("not an embedding table file")
        version, d_emb, count = struct.unpack_from("<III", data, 8)
        if version != EMB_VERSION:
            raise DataError(f"unsupported embedding table version {version}")
        pos = 20
        vectors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            token = data[pos:pos + n].decode("utf-8")
            pos += n
            vec = np.frombuffer(data, dtype="<f8", count=d_emb, offset=pos).astype(np.float64)
            pos += 8 * d_emb
            vectors[token] = vec
        return cls(vectors, d_emb)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _item_sentences(corpus: Sequence[Session]) -> list[list[str]]:
    return [[e.item_id for e in s.events if e.item_id is not None] for s in corpus]


def train_item_embeddings(
    corpus: Sequence[Session],
    d_emb: int = 32,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    seed: int = 0,
    lr: float = 0.025,
    batch_size: int = 64,
) -> EmbeddingTable:
    """Skip-gram with negative sampling; one sentence per session.

    Each session's item-view events form a sentence. Training is
    deterministic for a given ``seed``; subsampling is off.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if d_emb < 1:
        raise ValueError("d_emb must be >= 1")
    sentences = _item_sentences(corpus)
    vocab: dict[str, int] = {}
    for sent in sentences:
        for tok in sent:
            vocab.setdefault(tok, len(vocab))
    if not vocab:
        raise ValueError("no item tokens")

    counts = np.zeros(len(vocab))
    centers, contexts = [], []
    for sent in sentences:
        ids = [vocab[t] for t in sent]
        for i, c in enumerate(ids):
            counts[c] += 1
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    centers.append(c)
                    contexts.append(ids[j])
    centers = np.array(centers, dtype=np.int64)
    contexts = np.array(contexts, dtype=np.int64)

    rng = np.random.default_rng(seed)
    V = len(vocab)
    w_in = (rng.random((V, d_emb)) - 0.5) / d_emb
    w_out = np.zeros((V, d_emb))
    noise = counts ** 0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    n_pairs = len(centers)
    total_steps = max(1, epochs * ((n_pairs + batch_size - 1) // batch_size))
    step = 0
    for _ in range(epochs):
        if n_pairs == 0:
            break
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, batch_size):
            idx = order[start:start + batch_size]
            c, o = centers[idx], contexts[idx]
            neg = np.searchsorted(noise_cdf, rng.random((len(idx), negatives)) * noise_cdf[-1])
            neg = np.minimum(neg, V - 1)
            alpha = lr * max(1e-4, 1.0 - step / total_steps)
            step += 1

            targets = np.concatenate([o[:, None], neg], axis=1)
            signs = np.zeros(targets.shape)
            signs[:, 0] = 1.0
            vc = w_in[c]
            vo = w_out[targets]
            score = np.einsum("bd,bnd->bn", vc, vo)
            g = (signs - 1.0 / (1.0 + np.exp(-score))) * alpha
            grad_in = np.einsum("bn,bnd->bd", g, vo)
            grad_out = g[:, :, None] * vc[:, None, :]
            np.add.at(w_out, targets, grad_out)
            np.add.at(w_in, c, grad_in)

    vectors = {tok: w_in[i].copy() for tok, i in vocab.items()}
    return EmbeddingTable(vectors, d_emb)


def densify(
    s: EncodedSession, m: SegmentMap, emb: Optional[EmbeddingTable] = None
) -> np.ndarray:
    """Expand an encoded session to a ``T x D`` matrix (one-hot first)."""
    T = len(s.active)
    onehot = np.zeros((T, m.total_width))
    np.put_along_axis(onehot, s.active, 1.0, axis=1)
    if emb is None:
        return onehot
    vecs = np.stack([emb.lookup(t) for t in s.item_ids]) if T else np.zeros((0, emb.d_emb))
    return np.concatenate([onehot, vecs], axis=1)


def active_from_dense(row: np.ndarray, l: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(row[:l]))


@dataclass
class Encoder:
    """Schema, segment map and optional embeddings needed to featurise sessions."""

    schema: DatasetSchema
    segment_map: SegmentMap
    embeddings: Optional[EmbeddingTable] = None

    @classmethod
    def from_schema(cls, schema: DatasetSchema, embeddings: Optional[EmbeddingTable] = None):
        return cls(schema, build_segment_map(schema), embeddings)

    @property
    def input_dim(self) -> int:
        extra = self.embeddings.d_emb if self.embeddings is not None else 0
        return self.segment_map.total_width + extra

    @property
    def width(self) -> int:
        return self.segment_map.total_width

    def fingerprint(self) -> str:
        h = hashlib.sha256(self.segment_map.fingerprint().encode())
        h.update(str(self.schema.sequence_length).encode())
        if self.embeddings is not None:
            h.update(self.embeddings.fingerprint().encode())
        return h.hexdigest()[:32]

    def encode(self, sessions: Sequence[Session]) -> list[EncodedSession]:
        T = self.schema.sequence_length
        return [encode_session(pad_or_truncate(s, T, self.schema), self.segment_map) for s in sessions]

    def dense(self, encoded: Sequence[EncodedSession]) -> np.ndarray:
        T = self.schema.sequence_length
        out = np.zeros((len(encoded), T, self.input_dim))
        for i, s in enumerate(encoded):
            out[i] = densify(s, self.segment_map, self.embeddings)
        return out

