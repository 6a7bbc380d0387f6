"""Sequence classifiers: stacked LSTM, CNN over transition fields, their fusion, and an MLP.

All four share one training loop (mini-batch Adagrad on softmax
cross-entropy) and one persistence format: ``params.bin`` holding the
:class:`~seqfraud.nn.ParameterStore` plus a ``model.txt`` sidecar of
``key=value`` lines with the config and the encoder fingerprint.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .encoder import Encoder
from .events import Session
from .metrics import auc as auc_score, ks as ks_score
from .mtf import batch_mtf

logger = logging.getLogger(__name__)

KINDS = ("rnn", "cnn_mtf", "fused", "mlp")


class ConfigError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite training loss at epoch {epoch}")
        self.epoch = epoch


class FingerprintMismatch(ValueError):
    pass


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    kind: str
    lstm_layers: tuple[int, ...] = (64, 64)
    conv_spec: tuple[tuple[int, int, int, int], ...] = ((8, 5, 1, 2), (16, 3, 1, 2))
    dense_spec: tuple[int, ...] = (32,)
    fusion_spec: tuple[int, ...] = (32,)
    lr: float = 0.01
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    class_weights: tuple[float, float] = (1.0, 1.0)
    embedding_dim: int = 32
    embedding_epochs: int = 5
    embedding_window: int = 5
    embedding_negatives: int = 5
    valid_fraction: float = 0.2
    mtf_smoothing: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown model kind {self.kind!r} (expected one of {', '.join(KINDS)})")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr: must be positive")
        if self.kind in ("rnn", "fused") and not self.lstm_layers:
            raise ConfigError("lstm_layers: required for kind " + self.kind)
        if self.kind in ("cnn_mtf", "fused") and not self.conv_spec:
            raise ConfigError("conv_spec: required for kind " + self.kind)
        if not 0 <= self.valid_fraction < 1:
            raise ConfigError("valid_fraction: must lie in [0, 1)")

    @property
    def uses_sequence(self) -> bool:
        return self.kind in ("rnn", "fused")

    @property
    def uses_fields(self) -> bool:
        return self.kind in ("cnn_mtf", "fused")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name}={_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(":".join(map(str, x)) if isinstance(x, tuple) else _format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _parse_conv(s: str):
    spec = []
    for item in s.split(","):
        if not item.strip():
            continue
        parts = tuple(int(x) for x in item.split(":"))
        if len(parts) != 4:
            raise ValueError("conv layers are filters:kernel:stride:pool")
        spec.append(parts)
    return tuple(spec)


_PARSERS: dict[str, Callable[[str], object]] = {
    "kind": str.strip,
    "lstm_layers": _parse_ints,
    "conv_spec": _parse_conv,
    "dense_spec": _parse_ints,
    "fusion_spec": _parse_ints,
    "lr": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "class_weights": lambda s: tuple(float(x) for x in s.split(",")),
    "embedding_dim": int,
    "embedding_epochs": int,
    "embedding_window": int,
    "embedding_negatives": int,
    "valid_fraction": float,
    "mtf_smoothing": float,
}


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key] = value
    return out


def config_from_dict(values: dict[str, str], source: str = "<config>") -> ModelConfig:
    kwargs = {}
    for key, value in values.items():
        if key not in _PARSERS:
            raise ConfigError(f"{key}: unknown model config key in {source}")
        try:
            kwargs[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{key}: invalid value {value!r} ({exc})") from exc
    if "kind" not in kwargs:
        raise ConfigError(f"kind: missing in {source}")
    if "class_weights" in kwargs and len(kwargs["class_weights"]) != 2:
        raise ConfigError("class_weights: need two values")
    return ModelConfig(**kwargs)


def load_config(path) -> ModelConfig:
    path = Path(path)
    return config_from_dict(parse_key_values(path.read_text(encoding="utf-8"), str(path)), str(path))


# -- features -----------------------------------------------------------------

@dataclass
class FeatureSet:
    """Model inputs for n sessions; only the arrays a model kind needs are set."""

    labels: Optional[np.ndarray] = None
    dense: Optional[np.ndarray] = None
    fields: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None

    def __len__(self):
        for a in (self.dense, self.fields, self.mean, self.labels):
            if a is not None:
                return len(a)
        return 0

    def subset(self, idx) -> "FeatureSet":
        pick = lambda a: None if a is None else a[idx]
        return FeatureSet(pick(self.labels), pick(self.dense), pick(self.fields), pick(self.mean))


def featurize(
    encoder: Encoder,
    sessions: Sequence[Session],
    kind: str,
    smoothing: float = 0.0,
    workers: int = 1,
) -> FeatureSet:
    encoded = encoder.encode(sessions)
    labels = None
    if all(s.label is not None for s in sessions):
        labels = np.array([s.label for s in sessions], dtype=np.int64)
    fs = FeatureSet(labels=labels)
    if kind in ("rnn", "fused", "mlp"):
        dense = encoder.dense(encoded)
        if kind == "mlp":
            fs.mean = dense.mean(axis=1)
        else:
            fs.dense = dense
    if kind in ("cnn_mtf", "fused"):
        fs.fields = batch_mtf(
            encoded, encoder.width, encoder.segment_map.pad_indices, smoothing, workers
        )
    return fs


# -- network ------------------------------------------------------------------

def conv_output_shape(l: int, conv_spec) -> tuple[int, int]:
    """(channels, side) after the conv/pool stack; raises on incompatible sizes."""
    side, channels = l, 1
    for j, (filters, kernel, stride, pool) in enumerate(conv_spec):
        if kernel > side:
            raise ConfigError(f"conv_spec: layer {j} kernel {kernel} exceeds input side {side} (l={l})")
        side = (side - kernel) // stride + 1
        if pool > side:
            raise ConfigError(f"conv_spec: layer {j} pool {pool} exceeds side {side} (l={l})")
        side = (side - pool) // pool + 1
        channels = filters
    return channels, side


def _add_dense(params, rng, prefix, fan_in, widths):
    for j, w in enumerate(widths):
        params.add(f"{prefix}.dense{j}.W", nn.glorot_uniform(rng, (fan_in, w), fan_in, w))
        params.add(f"{prefix}.dense{j}.b", np.zeros(w))
        fan_in = w
    return fan_in


def init_params(cfg: ModelConfig, input_dim: int, width: int) -> nn.ParameterStore:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    params = nn.ParameterStore(cfg.seed)
    rnn_out = cnn_out = 0
    if cfg.uses_sequence:
        d = input_dim
        for j, u in enumerate(cfg.lstm_layers):
            params.add(f"lstm{j}.W", nn.glorot_uniform(rng, (d + u, 4 * u), d + u, 4 * u))
            b = np.zeros(4 * u)
            b[u:2 * u] = 1.0
            params.add(f"lstm{j}.b", b)
            d = u
        rnn_out = d
    if cfg.uses_fields:
        c = 1
        for j, (filters, kernel, _, _) in enumerate(cfg.conv_spec):
            shape = (filters, c, kernel, kernel)
            params.add(f"conv{j}.K", nn.glorot_uniform(rng, shape, c * kernel * kernel, filters * kernel * kernel))
            params.add(f"conv{j}.b", np.zeros(filters))
            c = filters
        channels, side = conv_output_shape(width, cfg.conv_spec)
        cnn_out = channels * side * side
    if cfg.kind == "fused":
        cnn_feat = _add_dense(params, rng, "cnn", cnn_out, cfg.dense_spec)
        top = _add_dense(params, rng, "fuse", cnn_feat + rnn_out, cfg.fusion_spec)
    else:
        fan_in = {"rnn": rnn_out, "cnn_mtf": cnn_out, "mlp": input_dim}[cfg.kind]
        top = _add_dense(params, rng, "head", fan_in, cfg.dense_spec)
    params.add("out.W", nn.glorot_uniform(rng, (top, 2), top, 2))
    params.add("out.b", np.zeros(2))
    return params


def _dense_stack(x, params, prefix, n_layers):
    acts = [x]
    for j in range(n_layers):
        x = np.tanh(nn.dense_forward(x, params[f"{prefix}.dense{j}.W"], params[f"{prefix}.dense{j}.b"]))
        acts.append(x)
    return x, acts


def _dense_stack_backward(dy, params, prefix, acts, grads):
    for j in range(len(acts) - 2, -1, -1):
        da = nn.tanh_backward(dy, acts[j + 1])
        dy, grads[f"{prefix}.dense{j}.W"], grads[f"{prefix}.dense{j}.b"] = nn.dense_backward(
            da, acts[j], params[f"{prefix}.dense{j}.W"]
        )
    return dy


def _conv_stack(fields, params, conv_spec):
    x = fields[:, None, :, :]
    caches = []
    for j, (_, _, stride, pool) in enumerate(conv_spec):
        z = np.tanh(nn.conv2d_forward(x, params[f"conv{j}.K"], params[f"conv{j}.b"], stride))
        caches.append((x, z))
        x = nn.avg_pool2d(z, pool)
    return x.reshape(len(x), -1), (caches, x.shape)


def _conv_stack_backward(dflat, params, conv_spec, cache, grads):
    caches, out_shape = cache
    dx = dflat.reshape(out_shape)
    for j in range(len(conv_spec) - 1, -1, -1):
        _, _, stride, pool = conv_spec[j]
        x, z = caches[j]
        dz = nn.avg_pool2d_backward(dx, z.shape, pool)
        da = nn.tanh_backward(dz, z)
        dx, grads[f"conv{j}.K"], grads[f"conv{j}.b"] = nn.conv2d_backward(da, x, params[f"conv{j}.K"], stride)


def network_forward(cfg: ModelConfig, params: nn.ParameterStore, fs: FeatureSet):
    """Logits ``(n, 2)`` and a cache for :func:`network_backward`."""
    cache = {}
    if cfg.uses_sequence:
        layers = [(params[f"lstm{j}.W"], params[f"lstm{j}.b"]) for j in range(len(cfg.lstm_layers))]
        h, cache["lstm"] = nn.lstm_stack_forward_cached(fs.dense, layers)
    if cfg.uses_fields:
        conv_feat, cache["conv"] = _conv_stack(fs.fields, params, cfg.conv_spec)

    if cfg.kind == "fused":
        cnn_feat, cache["cnn"] = _dense_stack(conv_feat, params, "cnn", len(cfg.dense_spec))
        joint = np.concatenate([cnn_feat, h], axis=1)
        cache["split"] = cnn_feat.shape[1]
        top, cache["fuse"] = _dense_stack(joint, params, "fuse", len(cfg.fusion_spec))
    else:
        x = {"rnn": lambda: h, "cnn_mtf": lambda: conv_feat, "mlp": lambda: fs.mean}[cfg.kind]()
        top, cache["head"] = _dense_stack(x, params, "head", len(cfg.dense_spec))
    cache["top"] = top
    return nn.dense_forward(top, params["out.W"], params["out.b"]), cache


def network_backward(cfg: ModelConfig, params: nn.ParameterStore, cache, dlogits) -> dict:
    grads = {}
    dtop, grads["out.W"], grads["out.b"] = nn.dense_backward(dlogits, cache["top"], params["out.W"])
    if cfg.kind == "fused":
        djoint = _dense_stack_backward(dtop, params, "fuse", cache["fuse"], grads)
        split = cache["split"]
        dcnn, dh = djoint[:, :split], djoint[:, split:]
        dconv = _dense_stack_backward(dcnn, params, "cnn", cache["cnn"], grads)
    else:
        dx = _dense_stack_backward(dtop, params, "head", cache["head"], grads)
        dh = dconv = dx
    if cfg.uses_sequence:
        _, layer_grads = nn.lstm_stack_backward(dh, cache["lstm"])
        for j, (dW, db) in enumerate(layer_grads):
            grads[f"lstm{j}.W"], grads[f"lstm{j}.b"] = dW, db
    if cfg.uses_fields:
        _conv_stack_backward(dconv, params, cfg.conv_spec, cache["conv"], grads)
    return grads


def branch_of(name: str) -> str:
    if name.startswith("lstm"):
        return "rnn"
    if name.startswith(("conv", "cnn.")):
        return "cnn"
    return "head"


# -- trained model ------------------------------------------------------------

@dataclass
class TrainedModel:
    config: ModelConfig
    params: nn.ParameterStore
    fingerprint: str
    input_dim: int
    width: int
    valid_auc: Optional[float] = None

    def check_fingerprint(self, fingerprint: Optional[str]) -> None:
        if fingerprint is not None and fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"encoder fingerprint {fingerprint} does not match model ({self.fingerprint})"
            )

    def logits(self, fs: FeatureSet, chunk: int = 512) -> np.ndarray:
        n = len(fs)
        out = np.zeros((n, 2))
        for start in range(0, n, chunk):
            idx = slice(start, start + chunk)
            out[idx] = network_forward(self.config, self.params, fs.subset(idx))[0]
        return out

    def predict_proba(self, fs: FeatureSet) -> np.ndarray:
        """Probability of the fraud class for each session."""
        z = self.logits(fs)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, 1] / e.sum(axis=1)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.params.save(directory / "params.bin")
        meta = self.config.dumps()
        meta += f"fingerprint={self.fingerprint}\ninput_dim={self.input_dim}\nwidth={self.width}\n"
        if self.valid_auc is not None:
            meta += f"valid_auc={self.valid_auc!r}\n"
        (directory / "model.txt").write_text(meta, encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "TrainedModel":
        directory = Path(directory)
        values = parse_key_values((directory / "model.txt").read_text(encoding="utf-8"))
        try:
            fingerprint = values.pop("fingerprint")
            input_dim = int(values.pop("input_dim"))
            width = int(values.pop("width"))
        except KeyError as exc:
            raise ConfigError(f"{exc.args[0]}: missing from model.txt") from exc
        valid_auc = values.pop("valid_auc", None)
        cfg = config_from_dict(values, str(directory / "model.txt"))
        params = nn.ParameterStore.load(directory / "params.bin")
        expected = init_params(cfg, input_dim, width).shapes()
        if params.shapes() != expected:
            raise ConfigError("params.bin does not match the model config shapes")
        return cls(cfg, params, fingerprint, input_dim, width,
                   None if valid_auc is None else float(valid_auc))


def _require_kind(model: TrainedModel, allowed, fingerprint):
    if model.config.kind not in allowed:
        raise ConfigError(f"kind: model kind {model.config.kind!r} not in {allowed}")
    model.check_fingerprint(fingerprint)


def forward_rnn(batch: np.ndarray, model: TrainedModel, fingerprint: Optional[str] = None) -> np.ndarray:
    """Logits of an ``rnn`` model for dense sessions ``(n, T, D)``."""
    _require_kind(model, ("rnn",), fingerprint)
    return network_forward(model.config, model.params, FeatureSet(dense=batch))[0]


def forward_cnn_mtf(fields: np.ndarray, model: TrainedModel, fingerprint: Optional[str] = None) -> np.ndarray:
    _require_kind(model, ("cnn_mtf",), fingerprint)
    return network_forward(model.config, model.params, FeatureSet(fields=fields))[0]


def forward_fused(batch: np.ndarray, fields: np.ndarray, model: TrainedModel,
                  fingerprint: Optional[str] = None) -> np.ndarray:
    _require_kind(model, ("fused",), fingerprint)
    if len(batch) != len(fields):
        raise ValueError(f"fused: {len(batch)} sessions but {len(fields)} transition fields")
    return network_forward(model.config, model.params, FeatureSet(dense=batch, fields=fields))[0]


def forward_mlp(batch: np.ndarray, model: TrainedModel, fingerprint: Optional[str] = None) -> np.ndarray:
    """``batch`` is either mean event vectors ``(n, D)`` or dense sessions ``(n, T, D)``."""
    _require_kind(model, ("mlp",), fingerprint)
    if batch.ndim == 3:
        batch = batch.mean(axis=1)
    return network_forward(model.config, model.params, FeatureSet(mean=batch))[0]


# -- training -----------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    valid_auc: Optional[float] = None
    valid_ks: Optional[float] = None
    grad_norms: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {"epoch": self.epoch, "train_loss": self.train_loss,
               "valid_auc": self.valid_auc, "valid_ks": self.valid_ks}
        for k, v in sorted(self.grad_norms.items()):
            row[f"grad_norm_{k}"] = v
        return row


def fit(
    cfg: ModelConfig,
    train: FeatureSet,
    valid: Optional[FeatureSet],
    input_dim: int,
    width: int,
    fingerprint: str = "",
) -> tuple[TrainedModel, list[EpochLog]]:
    """Mini-batch Adagrad; keeps the parameters of the best validation-AUC epoch."""
    labels = train.labels
    if labels is None or len(np.unique(labels)) < 2:
        raise ValueError("training set must contain both classes")
    params = init_params(cfg, input_dim, width)
    state = nn.AdagradState.for_params(params, cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    class_w = np.asarray(cfg.class_weights, dtype=np.float64)
    n = len(train)
    score_valid = valid is not None and valid.labels is not None and len(np.unique(valid.labels)) == 2

    best = params.copy()
    best_auc = -np.inf
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        norms: dict[str, list] = {}
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train.subset(idx)
            logits, cache = network_forward(cfg, params, batch)
            weights = None if np.all(class_w == 1.0) else class_w[batch.labels]
            loss, _, dlogits = nn.softmax_xent(logits, batch.labels, weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * len(idx)
            grads = network_backward(cfg, params, cache, dlogits)
            sq: dict[str, float] = {}
            for name, g in grads.items():
                sq[branch_of(name)] = sq.get(branch_of(name), 0.0) + float((g * g).sum())
            for k, v in sq.items():
                norms.setdefault(k, []).append(np.sqrt(v))
            nn.adagrad_step(params, grads, state)
        entry = EpochLog(epoch, total / n, grad_norms={k: float(np.mean(v)) for k, v in norms.items()})
        if not all(np.isfinite(v).all() for _, v in params.items()):
            raise TrainingDiverged(epoch)
        if score_valid:
            model = TrainedModel(cfg, params, fingerprint, input_dim, width)
            scores = model.predict_proba(valid)
            entry.valid_auc = auc_score(scores, valid.labels)
            entry.valid_ks = ks_score(scores, valid.labels)
            if entry.valid_auc > best_auc:
                best_auc = entry.valid_auc
                best = params.copy()
        else:
            best = params.copy()
        logger.info("epoch %d loss %.5f valid_auc %s", epoch, entry.train_loss, entry.valid_auc)
        history.append(entry)
    return (
        TrainedModel(cfg, best, fingerprint, input_dim, width, best_auc if score_valid else None),
        history,
    )


def split_train_valid(sessions: Sequence[Session], fraction: float, seed: int):
    """Seeded holdout split; returns ``(train, valid)`` lists."""
    if fraction <= 0:
        return list(sessions), []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    order = rng.permutation(len(sessions))
    n_valid = int(round(fraction * len(sessions)))
    valid_idx = set(order[:n_valid].tolist())
    train = [s for i, s in enumerate(sessions) if i not in valid_idx]
    valid = [s for i, s in enumerate(sessions) if i in valid_idx]
    return train, valid


def train(
    cfg: ModelConfig,
    train_sessions: Sequence[Session],
    valid_sessions: Optional[Sequence[Session]],
    encoder: Encoder,
    workers: int = 1,
) -> tuple[TrainedModel, list[EpochLog]]:
    """Featurise sessions with ``encoder`` and :func:`fit` a model."""
    train_fs = featurize(encoder, train_sessions, cfg.kind, cfg.mtf_smoothing, workers)
    valid_fs = None
    if valid_sessions:
        valid_fs = featurize(encoder, valid_sessions, cfg.kind, cfg.mtf_smoothing, workers)
    return fit(cfg, train_fs, valid_fs, encoder.input_dim, encoder.width, encoder.fingerprint())
