"""Differentiable losses: symmetric Chamfer distance and batched L2."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, _accumulate, _make


def chamfer(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> Tensor:
    """Symmetric mean nearest-neighbour distance between two point sets.

    0.5 * (mean_i min_j ||a_i - b_j|| + mean_j min_i ||b_j - a_i||), with
    unsquared Euclidean distances; gradients flow through the min-selected
    pairs. Coincident pairs contribute zero gradient.
    """
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b)
    pa, pb = ta.data, tb.data
    if pa.ndim != 2 or pb.ndim != 2 or pa.shape[1] != 3 or pb.shape[1] != 3:
        raise T.ShapeError(f"chamfer expects (N,3) and (M,3), got {pa.shape}, {pb.shape}")
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer: empty point cloud")
    n, m = pa.shape[0], pb.shape[0]
    diff = pa[:, None, :] - pb[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    ia = dist.argmin(axis=1)            # nearest b for each a
    ib = dist.argmin(axis=0)            # nearest a for each b
    da = dist[np.arange(n), ia]
    db = dist[ib, np.arange(m)]
    value = 0.5 * (da.mean() + db.mean())

    def backward(g):
        g = float(g)
        ga = np.zeros_like(pa)
        gb = np.zeros_like(pb)
        safe_a = np.maximum(da, 1e-12)[:, None]
        unit_a = (pa - pb[ia]) / safe_a
        unit_a[da < 1e-12] = 0.0
        ga += g * 0.5 / n * unit_a
        np.add.at(gb, ia, -g * 0.5 / n * unit_a)
        safe_b = np.maximum(db, 1e-12)[:, None]
        unit_b = (pb - pa[ib]) / safe_b
        unit_b[db < 1e-12] = 0.0
        gb += g * 0.5 / m * unit_b
        np.add.at(ga, ib, -g * 0.5 / m * unit_b)
        _accumulate(ta, ga)
        _accumulate(tb, gb)

    return _make(np.asarray(value, dtype=pa.dtype), (ta, tb), backward)


def l2_row_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean over rows of the Euclidean norm ||target_row - pred_row||."""
    diff = T.sub(Tensor(np.asarray(target, dtype=pred.dtype)), pred)
    return T.mean(T.sqrt(T.total(T.square(diff), axis=-1)))
