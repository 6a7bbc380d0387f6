import numpy as np
import pytest

from seqfraud.events import DatasetSchema, Domain, Event, Session


@pytest.fixture
def schema():
    return DatasetSchema(
        domains=(
            Domain("page_type", ("Register", "Login", "ID Verification", "Loan Index")),
            Domain("action_type", ("submission", "get", "click96")),
            Domain("duration", bin_edges=(5.0, 20.0, 60.0)),
        ),
        sequence_length=6,
    )


def make_session(schema, rows, sid="s1", label=1, items=None):
    """rows: list of (page, action, duration)."""
    events = []
    for i, (page, action, dur) in enumerate(rows):
        feats = (
            ("page_type", page),
            ("action_type", action),
            ("duration", schema.domains[2].bin(dur)),
        )
        item = items[i] if items else None
        events.append(Event(i + 1, feats, item, dur))
    return Session(sid, tuple(events), label)


@pytest.fixture
def table1_session(schema):
    return make_session(
        schema,
        [
            ("Register", "submission", 16.0),
            ("Login", "submission", 5.0),
            ("ID Verification", "get", 17.0),
            ("Loan Index", "click96", 77.0),
        ],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
