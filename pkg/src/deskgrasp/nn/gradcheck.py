"""Central finite-difference gradient checker (use float64 parameters)."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def gradient_check(
    f,
    params: list[Tensor],
    eps: float = 1e-5,
    samples: int = 25,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and numeric gradients.

    f() must rebuild its graph from the current parameter data and return a
    scalar Tensor. Up to `samples` coordinates per parameter are probed with
    central differences; the error metric is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    for p in params:
        p.grad = None
    out = f()
    out.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        if grad is None:
            grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        count = min(samples, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        for c in coords:
            original = flat[c]
            flat[c] = original + eps
            hi = float(f().data)
            flat[c] = original - eps
            lo = float(f().data)
            flat[c] = original
            numeric = (hi - lo) / (2.0 * eps)
            a = float(grad.reshape(-1)[c])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
