"""MLPs and the pre-layernorm single-head self-attention block."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .optim import ParameterStore, uniform_init

_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}


def init_mlp(
    store: ParameterStore, prefix: str, widths: list[int], rng: np.random.Generator
) -> None:
    """Affine chain parameters: widths = [in, hidden..., out]."""
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        store.add(f"{prefix}.w{i}", uniform_init((fan_in, fan_out), fan_in, rng, store.dtype))
        store.add(f"{prefix}.b{i}", uniform_init((fan_out,), fan_in, rng, store.dtype))


def mlp_layer_count(store: ParameterStore, prefix: str) -> int:
    i = 0
    while f"{prefix}.w{i}" in store:
        i += 1
    return i


def mlp_forward(
    store: ParameterStore,
    prefix: str,
    x: T.Tensor,
    widths: list[int] | None = None,
    activation: str = "relu",
) -> T.Tensor:
    """Affine + activation chain; the final layer is affine only."""
    layers = mlp_layer_count(store, prefix)
    if layers == 0:
        raise KeyError(f"no parameters under prefix {prefix!r}")
    if widths is not None and len(widths) - 1 != layers:
        raise T.ShapeError(f"widths {widths} disagree with {layers} stored layers")
    act = _ACTIVATIONS[activation]
    for i in range(layers):
        w, b = store[f"{prefix}.w{i}"], store[f"{prefix}.b{i}"]
        if widths is not None and tuple(w.shape) != (widths[i], widths[i + 1]):
            raise T.ShapeError(
                f"layer {i} weight {w.shape} != expected {(widths[i], widths[i + 1])}"
            )
        x = T.add(T.matmul(x, w), b)
        if i < layers - 1:
            x = act(x)
    return x


def mlp_forward_np(
    arrays: dict[str, np.ndarray], prefix: str, x: np.ndarray, activation: str = "relu"
) -> np.ndarray:
    """Graph-free forward pass for rollouts; same arithmetic as mlp_forward."""
    i = 0
    while f"{prefix}.w{i}" in arrays:
        x = x @ arrays[f"{prefix}.w{i}"] + arrays[f"{prefix}.b{i}"]
        if f"{prefix}.w{i + 1}" in arrays:
            x = np.maximum(x, 0.0) if activation == "relu" else np.tanh(x)
        i += 1
    if i == 0:
        raise KeyError(f"no parameters under prefix {prefix!r}")
    return x


def init_attention_block(
    store: ParameterStore, prefix: str, dim: int, rng: np.random.Generator
) -> None:
    """Single-head block: Q/K/V/O projections (no bias) + 4*dim feed-forward."""
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", uniform_init((dim, dim), dim, rng, store.dtype))
    hidden = 4 * dim
    store.add(f"{prefix}.ff_w1", uniform_init((dim, hidden), dim, rng, store.dtype))
    store.add(f"{prefix}.ff_b1", uniform_init((hidden,), dim, rng, store.dtype))
    store.add(f"{prefix}.ff_w2", uniform_init((hidden, dim), hidden, rng, store.dtype))
    store.add(f"{prefix}.ff_b2", uniform_init((dim,), hidden, rng, store.dtype))


def attention_block_forward(store: ParameterStore, prefix: str, tokens: T.Tensor) -> T.Tensor:
    """Pre-layernorm self-attention + pre-layernorm feed-forward, residuals.

    tokens is (..., n, d). Token-axis reductions (softmax normalizer and the
    attention-weighted sum) run through sorted_sum, so the output is exactly
    permutation equivariant in the token axis.
    """
    d = tokens.shape[-1]
    h = T.layernorm(tokens)
    q = T.matmul(h, store[f"{prefix}.wq"])
    k = T.matmul(h, store[f"{prefix}.wk"])
    v = T.matmul(h, store[f"{prefix}.wv"])
    scores = T.scale(T.dots_last(q, k), 1.0 / np.sqrt(d))
    attn = T.softmax(scores, axis=-1, stable_sum=True)
    n = tokens.shape[-2]
    prod = T.mul(
        T.reshape(attn, attn.shape + (1,)),
        T.reshape(v, v.shape[:-2] + (1, n, d)),
    )
    ctx = T.sorted_sum(prod, axis=-2)
    x = T.add(tokens, T.matmul(ctx, store[f"{prefix}.wo"]))

    h2 = T.layernorm(x)
    ff = T.add(T.matmul(h2, store[f"{prefix}.ff_w1"]), store[f"{prefix}.ff_b1"])
    ff = T.add(T.matmul(T.relu(ff), store[f"{prefix}.ff_w2"]), store[f"{prefix}.ff_b2"])
    return T.add(x, ff)
