"""Session / event data model and the line-delimited dataset format.

A dataset is a text file with one JSON object per line::

    {"session_id": "s1", "label": 1, "events": [
        {"page_type": "Register", "action_type": "submission", "duration": 16.0},
        {"page_type": "Item", "action_type": "click", "item_id": "i42", "duration": 5.0}]}

The companion schema file (JSON) declares the categorical domains, their
vocabularies, the bin edges of the numeric duration domain and the padded
sequence length.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
OOV_TOKEN = "<oov>"


class DataError(ValueError):
    """Raised for malformed datasets or schema violations."""


@dataclass(frozen=True)
class Domain:
    """One categorical domain.

    A domain with ``bin_edges`` is numeric: its value is read from the
    event's ``duration`` field and discretised into ``len(bin_edges) + 1``
    bins labelled ``bin0 .. binN``.
    """

    name: str
    vocab: tuple[str, ...] = ()
    bin_edges: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.bin_edges is not None:
            edges = tuple(float(e) for e in self.bin_edges)
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise DataError(f"domain {self.name!r}: bin edges must be strictly increasing")
            object.__setattr__(self, "bin_edges", edges)
            if not self.vocab:
                labels = tuple(f"bin{i}" for i in range(len(edges) + 1))
                object.__setattr__(self, "vocab", labels)
            elif len(self.vocab) != len(edges) + 1:
                raise DataError(f"domain {self.name!r}: need {len(edges) + 1} bin labels")
        vocab = tuple(str(v) for v in self.vocab)
        object.__setattr__(self, "vocab", vocab)
        if not vocab:
            raise DataError(f"domain {self.name!r}: empty vocabulary")
        if len(set(vocab)) != len(vocab):
            raise DataError(f"domain {self.name!r}: duplicate vocabulary values")

    @property
    def is_numeric(self) -> bool:
        return self.bin_edges is not None

    def bin(self, value: float) -> str:
        return self.vocab[int(np.searchsorted(self.bin_edges, value, side="right"))]


@dataclass(frozen=True)
class DatasetSchema:
    domains: tuple[Domain, ...]
    sequence_length: int
    pad_token: str = PAD_TOKEN
    oov_token: str = OOV_TOKEN

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        if not self.domains:
            raise DataError("schema declares no domains")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise DataError("duplicate domain names in schema")
        if self.sequence_length < 1:
            raise DataError("sequence_length must be positive")
        for d in self.domains:
            if self.pad_token in d.vocab or self.oov_token in d.vocab:
                raise DataError(f"domain {d.name!r}: vocabulary uses a reserved token")

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def to_dict(self) -> dict:
        doms = []
        for d in self.domains:
            entry = {"name": d.name, "vocab": list(d.vocab)}
            if d.bin_edges is not None:
                entry["bin_edges"] = list(d.bin_edges)
            doms.append(entry)
        return {
            "sequence_length": self.sequence_length,
            "pad_token": self.pad_token,
            "oov_token": self.oov_token,
            "domains": doms,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetSchema":
        try:
            domains = tuple(
                Domain(
                    name=d["name"],
                    vocab=tuple(d.get("vocab", ())),
                    bin_edges=tuple(d["bin_edges"]) if d.get("bin_edges") is not None else None,
                )
                for d in obj["domains"]
            )
            return cls(
                domains=domains,
                sequence_length=int(obj["sequence_length"]),
                pad_token=obj.get("pad_token", PAD_TOKEN),
                oov_token=obj.get("oov_token", OOV_TOKEN),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"invalid schema: {exc}") from exc


@dataclass(frozen=True)
class Event:
    index: int
    features: tuple[tuple[str, str], ...]
    item_id: Optional[str] = None
    duration: float = 0.0

    def __post_init__(self):
        if not self.duration >= 0:
            raise DataError(f"event {self.index}: negative duration {self.duration}")

    def value(self, domain: str) -> str:
        for name, v in self.features:
            if name == domain:
                return v
        raise KeyError(domain)


@dataclass(frozen=True)
class Session:
    session_id: str
    events: tuple[Event, ...]
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if not self.events:
            raise DataError(f"session {self.session_id}: no events")
        idx = [e.index for e in self.events]
        if idx[0] != 1 or any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataError(f"session {self.session_id}: event indexes must increase from 1")
        if self.label not in (None, 0, 1):
            raise DataError(f"session {self.session_id}: label must be 0 or 1")

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class Dataset:
    """Convenience bundle of sessions and the schema they conform to."""

    schema: DatasetSchema
    sessions: tuple[Session, ...] = field(default_factory=tuple)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sessions], dtype=np.int64)


def load_schema(path) -> DatasetSchema:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    return DatasetSchema.from_dict(obj)


def write_schema(schema: DatasetSchema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=2) + "\n", encoding="utf-8")


def _parse_event(obj, position: int, session_id: str, schema: DatasetSchema) -> Event:
    if not isinstance(obj, dict):
        raise DataError(f"session {session_id}: event {position} is not an object")
    duration = obj.get("duration", 0.0)
    try:
        duration = float(duration)
    except (TypeError, ValueError):
        raise DataError(f"session {session_id}: event {position} has non-numeric duration")
    features = []
    for d in schema.domains:
        if d.is_numeric:
            if "duration" not in obj:
                raise DataError(f"session {session_id}: missing domain {d.name!r} (needs duration)")
            value = d.bin(duration)
        else:
            if d.name not in obj:
                raise DataError(f"session {session_id}: missing domain {d.name!r}")
            value = str(obj[d.name])
            if value not in d.vocab and value != schema.pad_token:
                value = schema.oov_token
        features.append((d.name, value))
    item = obj.get("item_id")
    return Event(
        index=position,
        features=tuple(features),
        item_id=None if item is None else str(item),
        duration=duration,
    )


def parse_session(record: dict, schema: DatasetSchema) -> Session:
    sid = str(record["session_id"])
    events = record["events"]
    if not isinstance(events, list) or not events:
        raise DataError(f"session {sid}: events must be a non-empty array")
    label = record.get("label")
    if label is not None:
        label = int(label)
    return Session(
        session_id=sid,
        events=tuple(_parse_event(e, i + 1, sid, schema) for i, e in enumerate(events)),
        label=label,
    )


def load_sessions(path, schema: DatasetSchema) -> list[Session]:
    """Read a line-delimited dataset, mapping unseen categories to OOV."""
    sessions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("record is not an object")
                if "session_id" not in record or "events" not in record:
                    raise ValueError("record needs session_id and events")
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: malformed record ({exc})") from exc
            try:
                sessions.append(parse_session(record, schema))
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return sessions


def session_to_record(s: Session, schema: DatasetSchema) -> dict:
    numeric = {d.name for d in schema.domains if d.is_numeric}
    events = []
    for e in s.events:
        obj = {name: value for name, value in e.features if name not in numeric}
        if e.item_id is not None:
            obj["item_id"] = e.item_id
        obj["duration"] = e.duration
        events.append(obj)
    record = {"session_id": s.session_id}
    if s.label is not None:
        record["label"] = s.label
    record["events"] = events
    return record


def write_sessions(sessions: Iterable[Session], path, schema: DatasetSchema) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            fh.write(json.dumps(session_to_record(s, schema), separators=(",", ":")))
            fh.write("\n")


def pad_event(index: int, schema: DatasetSchema) -> Event:
    return Event(index=index, features=tuple((d.name, schema.pad_token) for d in schema.domains))


def pad_or_truncate(s: Session, T: int, schema: DatasetSchema) -> Session:
    """Return a copy of ``s`` with exactly ``T`` events.

    Long sessions keep their last ``T`` events; short ones are left-padded
    with pad events. Event indexes are renumbered ``1..T``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    events: Sequence[Event] = s.events[-T:]
    n_pad = T - len(events)
    out = [pad_event(i + 1, schema) for i in range(n_pad)]
    for i, e in enumerate(events):
        out.append(Event(n_pad + i + 1, e.features, e.item_id, e.duration))
    return Session(s.session_id, tuple(out), s.label)


def is_pad(e: Event, schema: DatasetSchema) -> bool:
    return all(v == schema.pad_token for _, v in e.features)
