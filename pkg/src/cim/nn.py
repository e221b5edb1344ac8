"""Small dense networks with hand-written backward passes and Adam.

Everything is float64. Networks are tanh MLPs with a linear output layer;
gradients accumulate into ``ParamTensor.grad`` so several loss terms can be
back-propagated before a single optimizer step.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

CHECKPOINT_MAGIC = b"CIMCKPT1"


class ParamTensor:
    """A parameter array with a gradient buffer of the same shape."""

    __slots__ = ("values", "grad", "version")

    def __init__(self, values):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.version = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def assign(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ShapeError(f"cannot assign {values.shape} to parameter of shape {self.shape}")
        self.values[...] = values
        self.version += 1

    def __repr__(self) -> str:
        return f"ParamTensor(shape={self.shape})"


@dataclass
class MlpCache:
    """Activations recorded by :meth:`Mlp.forward`, consumed by :meth:`Mlp.backward`."""

    net_id: int
    versions: tuple[int, ...]
    activations: list[np.ndarray]
    single: bool


class Mlp:
    """tanh hidden layers, identity output. Weights are stored ``(in, out)``."""

    def __init__(self, weights: Sequence[ParamTensor], biases: Sequence[ParamTensor]):
        if len(weights) == 0 or len(weights) != len(biases):
            raise ConfigError("an Mlp needs at least one layer and one bias per weight")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if len(w.shape) != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not form a layer")
            if i > 0 and weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[0]} inputs, previous layer emits {weights[i - 1].shape[1]}")
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def from_arrays(cls, layers: Iterable[tuple[np.ndarray, np.ndarray]]) -> "Mlp":
        ws, bs = [], []
        for w, b in layers:
            ws.append(ParamTensor(w))
            bs.append(ParamTensor(b))
        return cls(ws, bs)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[ParamTensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def named_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}l{i}.weight"] = w.values
            out[f"{prefix}l{i}.bias"] = b.values
        return out

    def load_named(self, tensors: dict[str, np.ndarray], prefix: str) -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.assign(tensors[f"{prefix}l{i}.weight"])
            b.assign(tensors[f"{prefix}l{i}.bias"])

    def copy(self) -> "Mlp":
        return Mlp.from_arrays((w.values.copy(), b.values.copy()) for w, b in zip(self.weights, self.biases))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _versions(self) -> tuple[int, ...]:
        return tuple(p.version for p in self.parameters())

    def forward(self, x) -> tuple[np.ndarray, MlpCache]:
        """Evaluate on a vector ``(in,)`` or a batch ``(n, in)``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got shape {x.shape}")
        acts = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.values + b.values
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        cache = MlpCache(id(self), self._versions(), acts, single)
        return (h[0] if single else h), cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: MlpCache, grad_output) -> np.ndarray:
        """Accumulate parameter gradients and return d(loss)/d(input)."""
        if cache.net_id != id(self) or cache.versions != self._versions():
            raise ContractError("cache was produced by a different network or before a parameter update")
        g = np.asarray(grad_output, dtype=np.float64)
        g = g[None, :] if cache.single else g
        acts = cache.activations
        if g.shape != acts[-1].shape:
            raise ShapeError(f"grad_output shape {g.shape} does not match output {acts[-1].shape}")
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            if i < last:
                g = g * (1.0 - acts[i + 1] ** 2)
            w, b = self.weights[i], self.biases[i]
            w.grad += acts[i].T @ g
            b.grad += g.sum(axis=0)
            g = g @ w.values.T
        return g[0] if cache.single else g


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def mlp_init(layer_dims: Sequence[int], seed: int, hidden_gain: float = np.sqrt(2.0),
             output_gain: float = 1.0) -> Mlp:
    """Orthogonal weights (scaled by ``gain``), zero biases; deterministic in ``seed``."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError(f"layer_dims needs at least two positive entries, got {list(layer_dims)}")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        gain = output_gain if i == len(dims) - 2 else hidden_gain
        layers.append((_orthogonal(rng, dims[i], dims[i + 1], gain), np.zeros(dims[i + 1])))
    return Mlp.from_arrays(layers)


class Adam:
    """Adam with bias correction and optional global-norm gradient clipping."""

    def __init__(self, params: Sequence[ParamTensor], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.max_grad_norm = max_grad_norm
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params)))

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                self.zero_grad()
                raise NumericError("non-finite gradient; Adam step aborted")
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * scale
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.version += 1
            p.zero_grad()


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors in the ``CIMCKPT1`` layout.

    Per tensor: u32 name length, utf-8 name, u32 rank, u64 dims, then the
    values as little-endian float64 in C order. All integers little-endian.
    """
    chunks = [CHECKPOINT_MAGIC]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a CIMCKPT1 checkpoint")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ConfigError(f"{path}: truncated or corrupt checkpoint") from exc
    return out
