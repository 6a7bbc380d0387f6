"""
Encoding a session and building its transition field
=====================================================

Each event becomes one active index per domain. The transition field counts
which indices follow which between consecutive events.
"""

import numpy as np

from seqfraud.encoder import Encoder
from seqfraud.events import DatasetSchema, Domain, Event, Session
from seqfraud.mtf import build_mtf, format_field

schema = DatasetSchema(
    domains=(
        Domain("page_type", ("Register", "Login", "ID Verification", "Loan Index")),
        Domain("action_type", ("submission", "get", "click")),
        Domain("duration", bin_edges=(5.0, 20.0, 60.0)),
    ),
    sequence_length=5,
)
enc = Encoder.from_schema(schema)
for name, a, b in enc.segment_map.segments:
    print(f"{name:12s} [{a}, {b})")

rows = [("Register", "get", 3.0), ("Login", "submission", 12.0), ("ID Verification", "click", 70.0)]
events = tuple(
    Event(i + 1, (("page_type", p), ("action_type", a), ("duration", schema.domains[2].bin(d))), duration=d)
    for i, (p, a, d) in enumerate(rows)
)
session = Session("demo", events, label=0)

# padding goes on the left, so the last row is the latest event
encoded = enc.encode([session])[0]
print(encoded.active)

tf = build_mtf(encoded.active, enc.width, exclude=enc.segment_map.pad_indices)
print("non-empty rows:", np.flatnonzero(tf.m.sum(axis=1)))
print(format_field(tf)[:200])
