"""Minimal float64 neural kernels with hand-written backward passes.

Forward functions are pure. Each differentiable kernel has a matching
``*_backward`` that takes the upstream gradient plus whatever the forward
needed, so gradients can be finite-difference checked in isolation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_MAGIC = b"SQFPRM\x00\x00"
PARAM_VERSION = 1


class ShapeError(ValueError):
    pass


# -- parameters ---------------------------------------------------------------

class ParameterStore:
    """Ordered name -> float64 array mapping with fixed shapes."""

    def __init__(self, seed: int = 0, entries: Optional[Mapping[str, np.ndarray]] = None):
        self.seed = int(seed)
        self.entries: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self.entries[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __setitem__(self, name: str, value) -> None:
        cur = self.entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ShapeError(f"parameter {name!r}: shape {value.shape} != {cur.shape}")
        cur[...] = value

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.entries.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.seed, {k: v.copy() for k, v in self.entries.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.entries.items()}

    def to_bytes(self) -> bytes:
        parts = [PARAM_MAGIC, struct.pack("<IqI", PARAM_VERSION, self.seed, len(self.entries))]
        for name, arr in self.entries.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<II", len(raw), arr.ndim))
            parts.append(raw)
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterStore":
        if data[:8] != PARAM_MAGIC:
            raise ValueError("not a parameter store file")
        version, seed, count = struct.unpack_from("<IqI", data, 8)
        if version != PARAM_VERSION:
            raise ValueError(f"unsupported parameter store version {version}")
        pos = 8 + struct.calcsize("<IqI")
        store = cls(seed)
        for _ in range(count):
            n, ndim = struct.unpack_from("<II", data, pos)
            pos += 8
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            store.add(name, arr)
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParameterStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -- dense --------------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or bias.shape != (W.shape[1],):
        raise ShapeError(f"dense: x{x.shape} incompatible with W{W.shape} / bias{bias.shape}")
    return x @ W + bias


def dense_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns ``(dx, dW, dbias)``."""
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


def tanh_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * (1.0 - y * y)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- LSTM ---------------------------------------------------------------------
# W has shape (d + u, 4u): rows [input; recurrent], columns [i | f | o | g].

def _split_lstm(W: np.ndarray, b: np.ndarray, d: int):
    if W.ndim != 2 or W.shape[1] % 4 or W.shape[0] != d + W.shape[1] // 4:
        raise ShapeError(f"lstm: W{W.shape} incompatible with input width {d}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"lstm: bias{b.shape} incompatible with W{W.shape}")
    return W.shape[1] // 4


def lstm_step_forward(x, h_prev, c_prev, W, b):
    u = _split_lstm(W, b, x.shape[1])
    if h_prev.shape != (x.shape[0], u) or c_prev.shape != h_prev.shape:
        raise ShapeError(f"lstm: state shapes {h_prev.shape}/{c_prev.shape}, expected {(x.shape[0], u)}")
    z = np.concatenate([x, h_prev], axis=1)
    a = z @ W + b
    i = sigmoid(a[:, :u])
    f = sigmoid(a[:, u:2 * u])
    o = sigmoid(a[:, 2 * u:3 * u])
    g = np.tanh(a[:, 3 * u:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (z, c_prev, i, f, o, g, tc, W)


def lstm_step(x_t, h_prev, c_prev, W, b):
    """One LSTM step; returns ``(h_t, c_t)``."""
    h, c, _ = lstm_step_forward(x_t, h_prev, c_prev, W, b)
    return h, c


def lstm_step_backward(dh, dc, cache):
    """Returns ``(dx, dh_prev, dc_prev, dW, db)``."""
    z, c_prev, i, f, o, g, tc, W = cache
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    da = np.concatenate(
        [dc * g * i * (1 - i), dc * c_prev * f * (1 - f), do * o * (1 - o), dc * i * (1 - g * g)],
        axis=1,
    )
    dz = da @ W.T
    d = z.shape[1] - i.shape[1]
    return dz[:, :d], dz[:, d:], dc * f, z.T @ da, da.sum(axis=0)


def lstm_layer_forward(X: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Run one LSTM layer over ``X`` (n, T, d) from zero state.

    Returns the hidden sequence (n, T, u) and a cache for the backward pass.
    """
    n, T, d = X.shape
    u = _split_lstm(W, b, d)
    Wx, Wh = W[:d], W[d:]
    xp = X @ Wx + b
    G = np.empty((n, T, 4 * u))
    C = np.empty((n, T, u))
    TC = np.empty((n, T, u))
    H = np.empty((n, T, u))
    h = np.zeros((n, u))
    c = np.zeros((n, u))
    for t in range(T):
        a = xp[:, t] + h @ Wh
        G[:, t, :3 * u] = sigmoid(a[:, :3 * u])
        G[:, t, 3 * u:] = np.tanh(a[:, 3 * u:])
        i, f, g = G[:, t, :u], G[:, t, u:2 * u], G[:, t, 3 * u:]
        c = f * c + i * g
        C[:, t] = c
        TC[:, t] = np.tanh(c)
        h = G[:, t, 2 * u:3 * u] * TC[:, t]
        H[:, t] = h
    return H, (X, W, G, C, TC, H)


def lstm_layer_backward(dH: np.ndarray, cache):
    """Backprop through a full layer; ``dH`` is the gradient on every hidden output."""
    X, W, G, C, TC, H = cache
    n, T, d = X.shape
    u = W.shape[1] // 4
    Wh = W[d:]
    dA = np.empty_like(G)
    dh_next = np.zeros((n, u))
    dc_next = np.zeros((n, u))
    for t in range(T - 1, -1, -1):
        i, f, o, g = G[:, t, :u], G[:, t, u:2 * u], G[:, t, 2 * u:3 * u], G[:, t, 3 * u:]
        c_prev = C[:, t - 1] if t > 0 else np.zeros((n, u))
        dh = dH[:, t] + dh_next
        tc = TC[:, t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dA[:, t, :u] = dc * g * i * (1 - i)
        dA[:, t, u:2 * u] = dc * c_prev * f * (1 - f)
        dA[:, t, 2 * u:3 * u] = dh * tc * o * (1 - o)
        dA[:, t, 3 * u:] = dc * i * (1 - g * g)
        dc_next = dc * f
        dh_next = dA[:, t] @ Wh.T
    H_prev = np.concatenate([np.zeros((n, 1, u)), H[:, :-1]], axis=1)
    dA2 = dA.reshape(n * T, 4 * u)
    dW = np.concatenate(
        [X.reshape(n * T, d).T @ dA2, H_prev.reshape(n * T, u).T @ dA2], axis=0
    )
    db = dA2.sum(axis=0)
    dX = dA @ W[:d].T
    return dX, dW, db


def lstm_stack_forward_cached(X: np.ndarray, layers: Sequence[tuple[np.ndarray, np.ndarray]]):
    if not layers:
        raise ShapeError("lstm stack needs at least one layer")
    caches = []
    out = X
    for j, (W, b) in enumerate(layers):
        if W.shape[0] - W.shape[1] // 4 != out.shape[2]:
            raise ShapeError(f"lstm layer {j}: W{W.shape} cannot consume width {out.shape[2]}")
        out, cache = lstm_layer_forward(out, W, b)
        caches.append(cache)
    return out[:, -1], caches


def lstm_stack_forward(X: np.ndarray, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Final hidden state of the top layer of a stacked LSTM over ``X`` (n, T, d)."""
    return lstm_stack_forward_cached(X, layers)[0]


def lstm_stack_backward(dh_last: np.ndarray, caches):
    """Returns ``(dX, [(dW, db), ...])`` for the layers in forward order."""
    grads = []
    H = caches[-1][5]
    dH = np.zeros_like(H)
    dH[:, -1] = dh_last
    for cache in reversed(caches):
        dH, dW, db = lstm_layer_backward(dH, cache)
        grads.append((dW, db))
    return dH, grads[::-1]


# -- convolution and pooling ----------------------------------------------------

def _out_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


def _windows(X: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (n, c, oh, ow, kh, kw) view
    return sliding_window_view(X, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(X: np.ndarray, K: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation of ``X`` (n, c, h, w) with ``K`` (f, c, kh, kw)."""
    n, c, h, w = X.shape
    f, kc, kh, kw = K.shape
    if kc != c or bias.shape != (f,):
        raise ShapeError(f"conv2d: X{X.shape} incompatible with K{K.shape} / bias{bias.shape}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    win = _windows(X, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ K.reshape(f, -1).T + bias
    return out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)


def conv2d_backward(dout: np.ndarray, X: np.ndarray, K: np.ndarray, stride: int = 1):
    """Returns ``(dX, dK, dbias)``."""
    n, c, h, w = X.shape
    f, _, kh, kw = K.shape
    oh, ow = dout.shape[2], dout.shape[3]
    win = _windows(X, kh, kw, stride)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)
    dK = (d2.T @ cols).reshape(K.shape)
    dcols = (d2 @ K.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    dX = np.zeros_like(X)
    for i in range(kh):
        for j in range(kw):
            dX[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dX, dK, d2.sum(axis=0)


def avg_pool2d(X: np.ndarray, p: int, stride: Optional[int] = None) -> np.ndarray:
    """Mean over ``p x p`` windows; ``stride`` defaults to ``p``."""
    stride = p if stride is None else stride
    n, c, h, w = X.shape
    if p > h or p > w:
        raise ShapeError(f"avg_pool2d: window {p} larger than input {h}x{w}")
    oh, ow = _out_size(h, p, stride), _out_size(w, p, stride)
    out = np.zeros((n, c, oh, ow))
    for i in range(p):
        for j in range(p):
            out += X[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
    return out / (p * p)


def avg_pool2d_backward(dout: np.ndarray, x_shape, p: int, stride: Optional[int] = None) -> np.ndarray:
    stride = p if stride is None else stride
    oh, ow = dout.shape[2], dout.shape[3]
    dX = np.zeros(x_shape)
    share = dout / (p * p)
    for i in range(p):
        for j in range(p):
            dX[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += share
    return dX


# -- loss ---------------------------------------------------------------------

def softmax_xent(logits: np.ndarray, labels, weights: Optional[np.ndarray] = None):
    """Mean softmax cross-entropy.

    Returns ``(loss, probs, grad_logits)``. Optional per-example ``weights``
    scale each term; the mean is still taken over ``n``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_norm
    probs = np.exp(logp)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = float(-(w * logp[np.arange(n), labels]).sum() / n)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad *= w[:, None] / n
    return loss, probs, grad


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdagradState:
    lr: float = 0.05
    eps: float = 1e-8
    accumulators: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterStore, lr: float = 0.05, eps: float = 1e-8) -> "AdagradState":
        return cls(lr, eps, params.zeros_like())


def adagrad_step(params: ParameterStore, grads: Mapping[str, np.ndarray], state: AdagradState):
    """In-place Adagrad update; returns ``(params, state)``."""
    for name in params:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}")
        acc = state.accumulators.setdefault(name, np.zeros_like(theta))
        acc += g * g
        theta -= state.lr * g / (np.sqrt(acc) + state.eps)
    return params, state
