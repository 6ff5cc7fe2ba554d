"""Flat parameter storage, a small float64 MLP with analytic gradients,
and first-order optimizers.

Everything runs in 64-bit floats so gradient identities can be checked to
tight tolerances. Parameters for all model pieces live in one flat vector
with named slices, which keeps optimizer state, checkpoints, and gradient
accumulation trivial.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "NonFiniteGradientError",
    "ParameterStore",
    "MlpSpec",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "GradientBuffer",
    "OptimConfig",
    "Optimizer",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_to_json",
]


class NonFiniteGradientError(FloatingPointError):
    """A gradient or loss left the finite range; the step must be aborted."""


class ParameterStore:
    """One flat float64 vector with named, non-overlapping slices."""

    def __init__(self, sizes: Mapping[str, int]):
        if not sizes:
            raise ValueError("parameter store needs at least one slice")
        self._slices: dict[str, slice] = {}
        offset = 0
        for name, n in sizes.items():
            n = int(n)
            if n < 1:
                raise ValueError(f"slice {name!r} must have positive size")
            self._slices[name] = slice(offset, offset + n)
            offset += n
        self.values = np.zeros(offset, dtype=np.float64)

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self._slices)

    def has(self, name: str) -> bool:
        return name in self._slices

    def view(self, name: str) -> np.ndarray:
        """Writable view of one named slice."""
        return self.values[self._slices[name]]

    def bounds(self, name: str) -> tuple[int, int]:
        s = self._slices[name]
        return s.start, s.stop

    def scalar(self, name: str) -> float:
        view = self.view(name)
        if view.size != 1:
            raise ValueError(f"slice {name!r} is not a scalar")
        return float(view[0])

    def set_scalar(self, name: str, value: float) -> None:
        view = self.view(name)
        if view.size != 1:
            raise ValueError(f"slice {name!r} is not a scalar")
        view[0] = value

    def sizes(self) -> dict[str, int]:
        return {name: s.stop - s.start for name, s in self._slices.items()}

    def copy(self) -> "ParameterStore":
        out = ParameterStore(self.sizes())
        out.values[:] = self.values
        return out


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a fully connected net: affine layers, nonlinear between.

    The output layer is linear. ``activation`` is ``tanh`` or ``leaky_relu``
    (slope 0.01); ``init_scale`` multiplies the uniform Glorot half-width.
    """

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "tanh"
    init_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer widths must be positive")
        if self.activation not in ("tanh", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.in_dim, *self.hidden, self.out_dim)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())


_LEAKY_SLOPE = 0.01


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, as one flat vector."""
    params = np.zeros(spec.n_params)
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        a = spec.init_scale * np.sqrt(6.0 / (fan_in + fan_out))
        n_w = fan_in * fan_out
        params[offset : offset + n_w] = rng.uniform(-a, a, size=n_w)
        offset += n_w + fan_out  # biases stay zero
    return params


def _layers(spec: MlpSpec, params: np.ndarray):
    """Yield (W, b) views into the flat vector, layer by layer."""
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        w = params[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = params[offset : offset + fan_out]
        offset += fan_out
        yield w, b


def _forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    hs = [x]
    zs = []
    layers = list(_layers(spec, params))
    for i, (w, b) in enumerate(layers):
        z = hs[-1] @ w.T + b
        zs.append(z)
        if i < len(layers) - 1:
            if spec.activation == "tanh":
                hs.append(np.tanh(z))
            else:
                hs.append(np.where(z > 0, z, _LEAKY_SLOPE * z))
        else:
            hs.append(z)
    return hs, zs


def mlp_forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the net on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != spec.in_dim:
        raise ValueError(f"input width {x.shape[1]} does not match spec ({spec.in_dim})")
    hs, _ = _forward_cached(spec, params, x)
    return hs[-1][0] if single else hs[-1]


def mlp_backward(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum_n <upstream_n, net(x_n)>.

    Returns (parameter gradient as a flat vector, input gradient with the
    shape of ``x``). Accepts a single vector or a batch of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        upstream = upstream[None, :]
    if upstream.shape != (x.shape[0], spec.out_dim):
        raise ValueError("upstream shape does not match the batch of outputs")
    hs, zs = _forward_cached(spec, params, x)
    grad = np.zeros(spec.n_params)
    layers = list(_layers(spec, params))
    bounds = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes():
        bounds.append((offset, fan_in, fan_out))
        offset += fan_in * fan_out + fan_out
    g = upstream
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            if spec.activation == "tanh":
                g = g * (1.0 - hs[i + 1] ** 2)
            else:
                g = g * np.where(zs[i] > 0, 1.0, _LEAKY_SLOPE)
        off, fan_in, fan_out = bounds[i]
        grad[off : off + fan_in * fan_out] = (g.T @ hs[i]).ravel()
        grad[off + fan_in * fan_out : off + fan_in * fan_out + fan_out] = g.sum(axis=0)
        g = g @ w
    return grad, (g[0] if single else g)


@dataclass
class GradientBuffer:
    """Accumulates flat gradients; useful when a step sums several pieces."""

    values: np.ndarray
    count: int = 0

    @classmethod
    def for_store(cls, store: ParameterStore) -> "GradientBuffer":
        return cls(np.zeros(len(store)))

    def add(self, grad: np.ndarray, scale: float = 1.0) -> None:
        self.values += scale * grad
        self.count += 1

    def reset(self) -> None:
        self.values[:] = 0.0
        self.count = 0


@dataclass(frozen=True)
class OptimConfig:
    method: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class Optimizer:
    """SGD or bias-corrected adaptive-moment updates on a ParameterStore.

    ``lr_overrides`` maps slice names to their own learning rates; anything
    else uses the base rate. A non-finite gradient aborts the step before
    any state is touched.
    """

    def __init__(
        self,
        store: ParameterStore,
        config: OptimConfig,
        lr_overrides: Mapping[str, float] | None = None,
    ):
        self.store = store
        self.config = config
        self.lr = np.full(len(store), config.lr)
        for name, lr in (lr_overrides or {}).items():
            start, stop = store.bounds(name)
            self.lr[start:stop] = lr
        self.m = np.zeros(len(store))
        self.v = np.zeros(len(store))
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.store.values.shape:
            raise ValueError("gradient length does not match the store")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError("non-finite gradient")
        cfg = self.config
        if cfg.method == "sgd":
            self.store.values -= self.lr * grad
            return
        self.t += 1
        self.m = cfg.beta1 * self.m + (1.0 - cfg.beta1) * grad
        self.v = cfg.beta2 * self.v + (1.0 - cfg.beta2) * grad * grad
        m_hat = self.m / (1.0 - cfg.beta1**self.t)
        v_hat = self.v / (1.0 - cfg.beta2**self.t)
        self.store.values -= self.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


_CKPT_MAGIC = b"GFNCK001"


def save_checkpoint(path, store: ParameterStore, meta: dict | None = None) -> None:
    """Write ``magic | header length | JSON header | float64 LE values``.

    The header records the slice table, a checksum of the value bytes, and
    any caller metadata (seed, step count, model shapes).
    """
    payload = store.values.astype("<f8").tobytes()
    header = {
        "format": 1,
        "slices": {name: list(store.bounds(name)) for name in store.names},
        "n_values": len(store),
        "crc32": zlib.crc32(payload),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[ParameterStore, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if values.size != header["n_values"]:
        raise ValueError("checkpoint payload truncated")
    if zlib.crc32(payload) != header["crc32"]:
        raise ValueError("checkpoint checksum mismatch")
    # the header is written with sorted keys; rebuild in offset order
    by_offset = sorted(header["slices"].items(), key=lambda kv: kv[1][0])
    sizes = {name: stop - start for name, (start, stop) in by_offset}
    store = ParameterStore(sizes)
    store.values[:] = values
    return store, header["meta"]


def checkpoint_to_json(store: ParameterStore, meta: dict | None = None) -> str:
    """Human-readable checkpoint dump (exact float64 values as decimals)."""
    doc = {
        "slices": {name: list(store.bounds(name)) for name in store.names},
        "values": store.values.tolist(),
        "meta": meta or {},
    }
    return json.dumps(doc, sort_keys=True)
