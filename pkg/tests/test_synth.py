import numpy as np
import pytest
from scipy.stats import binom, chi2

from seqfraud.encoder import Encoder
from seqfraud.events import load_sessions
from seqfraud.mtf import build_mtf
from seqfraud.synth import SynthConfig, dynamics, generate, make_dynamics, schema_for, write_dataset


def test_deterministic():
    cfg = SynthConfig(n_sessions=50, seed=9)
    assert generate(cfg) == generate(cfg)
    assert generate(cfg) != generate(cfg.replace(seed=10))


def test_fraud_rate_within_binomial_interval():
    cfg = SynthConfig(n_sessions=10_000, fraud_rate=0.1, T=4, seed=3)
    frac = np.mean([s.label for s in generate(cfg)])
    lo, hi = binom.interval(0.999, 10_000, 0.1)
    assert 0.08 <= lo / 10_000 <= frac <= hi / 10_000 <= 0.12


def test_matrices_validated():
    bad = np.full((8, 8), 0.2)
    with pytest.raises(ValueError):
        SynthConfig(transitions=(bad, bad))
    legit, fraud = make_dynamics(8, 0.4, seed=1)
    assert np.abs(legit.sum(axis=1) - 1).max() < 1e-12
    assert np.abs(fraud.sum(axis=1) - 1).max() < 1e-12


def test_zero_separation_gives_identical_dynamics():
    legit, fraud = make_dynamics(8, 0.0, seed=4)
    np.testing.assert_allclose(legit, fraud, atol=1e-15)


def _page_transition_counts(sessions, label, n_pages, pages):
    idx = {p: i for i, p in enumerate(pages)}
    counts = np.zeros((n_pages, n_pages))
    for s in sessions:
        if s.label != label:
            continue
        seq = [idx[e.value("page_type")] for e in s.events]
        for a, b in zip(seq, seq[1:]):
            counts[a, b] += 1
    return counts


def test_empirical_transitions_match_planted_chain():
    cfg = SynthConfig(n_sessions=2000, fraud_rate=0.5, T=30, separation=1.0, noise_rate=0.0, seed=5)
    pages = schema_for(cfg).domains[0].vocab
    sessions = generate(cfg)
    for label, planted in enumerate(dynamics(cfg)):
        counts = _page_transition_counts(sessions, label, cfg.n_pages, pages)
        for row, probs in zip(counts, planted):
            n = row.sum()
            assert n > 0
            support = probs > 0
            assert row[~support].sum() == 0
            expected = n * probs[support]
            stat = ((row[support] - expected) ** 2 / expected).sum()
            dof = max(support.sum() - 1, 1)
            assert stat < chi2.ppf(0.9999, dof)


def test_sessions_validate_and_round_trip(tmp_path):
    cfg = SynthConfig(n_sessions=30, T=12, seed=2)
    sessions = generate(cfg)
    data, schema_path = write_dataset(sessions, schema_for(cfg), tmp_path)
    assert load_sessions(data, schema_for(cfg)) == sessions
    enc = Encoder.from_schema(schema_for(cfg))
    encoded = enc.encode(sessions)
    assert all(e.active.shape == (12, 4) for e in encoded)
    assert any(e.item_id for s in sessions for e in s.events)


def test_mtf_concentrates_on_planted_chain():
    cfg = SynthConfig(n_sessions=40, fraud_rate=0.5, T=400, min_length=400, separation=1.0, noise_rate=0.0, seed=8)
    enc = Encoder.from_schema(schema_for(cfg))
    chains = dynamics(cfg)
    _, a, b = enc.segment_map.segments[0]
    errs = []
    for s, e in zip(generate(cfg), enc.encode(generate(cfg))):
        tf = build_mtf(e, enc.width)
        block = tf.counts[a + 1:a + 1 + cfg.n_pages, a + 1:a + 1 + cfg.n_pages].astype(float)
        rows = block.sum(axis=1, keepdims=True)
        est = np.divide(block, rows, out=np.zeros_like(block), where=rows > 0)
        seen = rows[:, 0] > 20
        errs.append(np.abs(est[seen] - chains[s.label][seen]).max())
    assert np.median(errs) < 0.2
