"""Named parameter store with bias-corrected Adam."""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Ordered name -> Tensor map plus per-parameter Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            t = self.params[name]
            if t.data.shape != value.shape:
                raise ValueError(
                    f"parameter {name!r}: shape {value.shape} != {t.data.shape}"
                )
            t.data = np.asarray(value, dtype=self.dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def checksum(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        for name in self.params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data.astype("<f4")).tobytes())
        return int.from_bytes(h.digest(), "little")

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())


def uniform_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def collect_grads(store: ParameterStore) -> dict[str, np.ndarray]:
    grads = {}
    for name, t in store.params.items():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
    return grads


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray] | None = None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam update over every parameter.

    Raises on NaN gradients: a NaN here means training has diverged and
    continuing would silently poison all moments.
    """
    if grads is None:
        grads = collect_grads(store)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        p = store.params[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
