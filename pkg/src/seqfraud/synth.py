"""Labelled synthetic sessions with class-dependent page-transition dynamics.

A latent page-type sequence is drawn from a per-class Markov chain; the other
domains (action, device, duration) depend only on the page type, so the
fraud signal lives in *transitions*, plus an optional duration shift.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .events import DatasetSchema, Domain, Event, Session, write_schema, write_sessions

PAGE_NAMES = ("Home", "Register", "Login", "ID Verification", "Loan Index", "Item", "Cart", "Submit")
ACTION_NAMES = ("click", "get", "submission", "scroll", "back", "input")
DEVICE_NAMES = ("ios", "android", "web", "wap", "tablet", "other")
ITEM_PAGE = 5


def _names(base, n, prefix):
    return tuple(base[:n]) if n <= len(base) else tuple(f"{prefix}{i}" for i in range(n))


@dataclass(frozen=True)
class SynthConfig:
    n_sessions: int = 1000
    fraud_rate: float = 0.15
    T: int = 40
    min_length: Optional[int] = None
    n_pages: int = 8
    n_actions: int = 5
    n_devices: int = 4
    duration_edges: tuple[float, ...] = (2.0, 5.0, 10.0, 20.0, 40.0, 80.0)
    n_item_pools: int = 6
    pool_size: int = 8
    separation: float = 0.3
    noise_rate: float = 0.1
    fraud_duration_scale: float = 1.0
    dynamics_seed: int = 7
    seed: int = 0
    transitions: Optional[tuple] = None  # (legit, fraud) matrices; built from separation if None

    def __post_init__(self):
        if not 0 < self.fraud_rate < 1:
            raise ValueError("fraud_rate must lie in (0, 1)")
        if not 0 <= self.noise_rate < 1:
            raise ValueError("noise_rate must lie in [0, 1)")
        if self.T < 2 or self.n_sessions < 1:
            raise ValueError("need T >= 2 and n_sessions >= 1")
        if not 0 <= self.separation <= 1:
            raise ValueError("separation must lie in [0, 1]")
        if self.transitions is not None:
            mats = tuple(np.asarray(m, dtype=np.float64) for m in self.transitions)
            for m in mats:
                if m.shape != (self.n_pages, self.n_pages):
                    raise ValueError("transition matrices must be n_pages x n_pages")
                if (m < 0).any() or np.abs(m.sum(axis=1) - 1).max() > 1e-12:
                    raise ValueError("transition matrices must be row-stochastic")
            object.__setattr__(self, "transitions", mats)

    @property
    def shortest(self) -> int:
        return self.min_length if self.min_length is not None else max(2, self.T // 2)

    def replace(self, **changes) -> "SynthConfig":
        return dataclasses.replace(self, **changes)


def make_dynamics(n_pages: int, separation: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Legitimate chain with Dirichlet rows; fraud chain mixes in a scripted page cycle."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    legit = rng.dirichlet(np.full(n_pages, 0.8), size=n_pages)
    cycle = rng.permutation(n_pages)
    script = np.zeros((n_pages, n_pages))
    script[cycle, np.roll(cycle, -1)] = 1.0
    fraud = (1 - separation) * legit + separation * script
    fraud /= fraud.sum(axis=1, keepdims=True)
    return legit, fraud


def schema_for(cfg: SynthConfig) -> DatasetSchema:
    return DatasetSchema(
        domains=(
            Domain("page_type", _names(PAGE_NAMES, cfg.n_pages, "page")),
            Domain("action_type", _names(ACTION_NAMES, cfg.n_actions, "action")),
            Domain("device", _names(DEVICE_NAMES, cfg.n_devices, "device")),
            Domain("duration", bin_edges=tuple(cfg.duration_edges)),
        ),
        sequence_length=cfg.T,
    )


@dataclass(frozen=True)
class _Emission:
    action_probs: np.ndarray  # (pages, actions)
    device_probs: np.ndarray
    log_duration: np.ndarray  # per-page mean of log seconds


def _emission(cfg: SynthConfig) -> _Emission:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.dynamics_seed, 12]))
    return _Emission(
        action_probs=rng.dirichlet(np.full(cfg.n_actions, 0.5), size=cfg.n_pages),
        device_probs=rng.dirichlet(np.full(cfg.n_devices, 2.0)),
        log_duration=rng.uniform(np.log(3.0), np.log(40.0), size=cfg.n_pages),
    )


def dynamics(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.transitions is not None:
        return cfg.transitions
    return make_dynamics(cfg.n_pages, cfg.separation, cfg.dynamics_seed)


def generate(cfg: SynthConfig) -> list[Session]:
    """Draw ``cfg.n_sessions`` labelled sessions; deterministic in ``cfg.seed``.

    Absorbing states in the supplied chains are allowed; such sessions simply
    stay on one page.
    """
    chains = dynamics(cfg)
    cdfs = [np.cumsum(c, axis=1) for c in chains]
    em = _emission(cfg)
    schema = schema_for(cfg)
    pages = schema.domains[0].vocab
    actions = schema.domains[1].vocab
    devices = schema.domains[2].vocab
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 13]))

    sessions = []
    for n in range(cfg.n_sessions):
        label = int(rng.random() < cfg.fraud_rate)
        length = int(rng.integers(cfg.shortest, cfg.T + 1))
        theme = int(rng.integers(cfg.n_item_pools))
        device = int(rng.choice(cfg.n_devices, p=em.device_probs))
        scale = cfg.fraud_duration_scale if label else 1.0
        page = int(rng.integers(cfg.n_pages))
        events = []
        for t in range(length):
            if t > 0:
                u = rng.random() * cdfs[label][page, -1]
                page = min(int(np.searchsorted(cdfs[label][page], u, side="right")), cfg.n_pages - 1)
            action = int(rng.choice(cfg.n_actions, p=em.action_probs[page]))
            dev = device
            duration = float(np.exp(rng.normal(em.log_duration[page], 0.5)) * scale)
            if rng.random() < cfg.noise_rate:
                action = int(rng.integers(cfg.n_actions))
            if rng.random() < cfg.noise_rate:
                dev = int(rng.integers(cfg.n_devices))
            if rng.random() < cfg.noise_rate:
                duration = float(rng.exponential(20.0))
            duration = round(duration, 3)
            item = None
            if page == ITEM_PAGE and cfg.n_pages > ITEM_PAGE:
                item = f"item{theme * cfg.pool_size + int(rng.integers(cfg.pool_size))}"
            features = (
                ("page_type", pages[page]),
                ("action_type", actions[action]),
                ("device", devices[dev]),
                ("duration", schema.domains[3].bin(duration)),
            )
            events.append(Event(t + 1, features, item, duration))
        sessions.append(Session(f"s{n:06d}", tuple(events), label))
    return sessions


def write_dataset(sessions, schema: DatasetSchema, out_dir, name: str = "sessions") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / f"{name}.jsonl"
    schema_path = out_dir / "schema.json"
    write_sessions(sessions, data_path, schema)
    write_schema(schema, schema_path)
    return data_path, schema_path


_FIELD_TYPES = {
    "n_sessions": int, "fraud_rate": float, "T": int, "min_length": int, "n_pages": int,
    "n_actions": int, "n_devices": int, "n_item_pools": int, "pool_size": int,
    "separation": float, "noise_rate": float, "fraud_duration_scale": float,
    "dynamics_seed": int, "seed": int,
    "duration_edges": lambda s: tuple(float(x) for x in s.split(",")),
}


def config_from_dict(values: dict) -> SynthConfig:
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"{key}: unknown synth config key")
        kwargs[key] = _FIELD_TYPES[key](value)
    return SynthConfig(**kwargs)
