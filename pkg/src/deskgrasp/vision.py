"""Partial-cloud synthesis from the camera rig, and PCA pose proxies.

Visibility uses spherical-flip hidden-point removal per camera: points are
flipped outward around the viewpoint and only those landing on the convex
hull are visible. A small simplex anchored at the viewpoint keeps the hull
full-dimensional even for degenerate clouds. Points whose view rays to all
five cameras pass close to a hand body point are treated as hand-occluded.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.spatial import ConvexHull

from .sim import DEFAULT_RIG, CameraRig


class PCAResult(NamedTuple):
    axes: np.ndarray          # (3, 3), rows = principal axes, descending
    eigenvalues: np.ndarray   # (3,), descending
    degenerate: bool


class PartialCloud(NamedTuple):
    points: np.ndarray        # (n_out, 3)
    source_idx: np.ndarray    # indices into the input cloud, pre-resampling
    degenerate: bool


def pca_axes(cloud: np.ndarray) -> PCAResult:
    """Principal axes of the centered population covariance (1/N scaling).

    Each axis is flipped so its largest-magnitude component is positive,
    ties broken by lowest index. Rank-deficient directions are filled by a
    right-handed completion and flagged.
    """
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[0] < 3:
        raise ValueError("need at least 3 points for PCA")
    centered = cloud - cloud.mean(axis=0)
    cov = centered.T @ centered / cloud.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    axes = eigvecs[:, order].T

    tol = max(eigvals[0], 0.0) * 1e-10 + 1e-18
    rank = int((eigvals > tol).sum())
    for r in range(rank):
        j = int(np.argmax(np.abs(axes[r])))
        if axes[r, j] < 0:
            axes[r] = -axes[r]

    if rank == 3:
        return PCAResult(axes, eigvals, False)
    out = np.eye(3)
    if rank >= 1:
        out[0] = axes[0]
        if rank == 2:
            out[1] = axes[1]
        else:
            e = np.zeros(3)
            e[int(np.argmin(np.abs(out[0])))] = 1.0
            v = np.cross(out[0], e)
            out[1] = v / np.linalg.norm(v)
        v = np.cross(out[0], out[1])
        out[2] = v / np.linalg.norm(v)
    return PCAResult(out, eigvals, True)


def pca_axes_batch(clouds: np.ndarray) -> np.ndarray:
    """Vectorized pca_axes over (B, N, 3) clouds -> (B, 3, 3) axis rows.

    Full-rank rows use a batched eigen-decomposition with the same sign
    convention as pca_axes; near-degenerate rows fall back to the scalar
    path so completion behavior stays identical.
    """
    clouds = np.asarray(clouds, dtype=float)
    centered = clouds - clouds.mean(axis=1, keepdims=True)
    cov = np.einsum("bni,bnj->bij", centered, centered) / clouds.shape[1]
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = eigvals[:, ::-1]
    axes = np.swapaxes(eigvecs[:, :, ::-1], 1, 2)
    tol = np.maximum(eigvals[:, :1], 0.0) * 1e-10 + 1e-18
    degenerate = (eigvals <= tol).any(axis=1)
    j = np.argmax(np.abs(axes), axis=2)
    signs = np.take_along_axis(axes, j[:, :, None], axis=2)[:, :, 0]
    axes = np.where((signs < 0)[:, :, None], -axes, axes)
    for i in np.where(degenerate)[0]:
        axes[i] = pca_axes(clouds[i]).axes
    return axes


def hpr_visible(cloud: np.ndarray, camera: np.ndarray, factor: float = 100.0) -> np.ndarray:
    """Boolean visibility mask via spherical-flip hidden-point removal."""
    p = np.asarray(cloud, dtype=float) - np.asarray(camera, dtype=float)
    norms = np.maximum(np.linalg.norm(p, axis=1), 1e-12)
    radius = factor * norms.max()
    flipped = p * ((2.0 * radius - norms) / norms)[:, None]
    eps = radius * 1e-6
    anchor = np.array(
        [
            [0.0, 0.0, 0.0],
            [eps, 0.0, 0.0],
            [0.0, eps, 0.0],
            [0.0, 0.0, eps],
            [-eps, -eps, -eps],
        ]
    )
    hull = ConvexHull(np.vstack([flipped, anchor]))
    mask = np.zeros(cloud.shape[0], dtype=bool)
    mask[hull.vertices[hull.vertices < cloud.shape[0]]] = True
    return mask


def _ray_blocked(
    points: np.ndarray, camera: np.ndarray, hand_points: np.ndarray, radius: float
) -> np.ndarray:
    """True where the point->camera segment passes within radius of a hand point."""
    ab = camera[None, :] - points                       # (N, 3)
    denom = np.maximum((ab * ab).sum(axis=1), 1e-18)
    ah = hand_points[None, :, :] - points[:, None, :]   # (N, K, 3)
    t = np.clip(np.einsum("nkj,nj->nk", ah, ab) / denom[:, None], 0.0, 1.0)
    closest = points[:, None, :] + t[:, :, None] * ab[:, None, :]
    d = np.linalg.norm(hand_points[None, :, :] - closest, axis=2)
    return d.min(axis=1) < radius


def render_partial_cloud(
    world_cloud: np.ndarray,
    hand_points: np.ndarray | None,
    n_out: int,
    rig: CameraRig = DEFAULT_RIG,
    occlusion_radius: float = 0.015,
    hpr_factor: float = 100.0,
) -> PartialCloud:
    """Camera-visible object points, resampled to exactly n_out points.

    Deterministic: visibility is the union over the rig's viewpoints, hand
    occlusion removes points blocked toward every camera, and resampling
    uses evenly spaced (or wrapped) indices rather than an RNG. If nothing
    survives, the nearest-to-camera point is replicated and flagged.
    """
    cloud = np.asarray(world_cloud, dtype=float)
    cams = rig.positions
    visible = np.zeros(cloud.shape[0], dtype=bool)
    for cam in cams:
        visible |= hpr_visible(cloud, cam, hpr_factor)

    if hand_points is not None and visible.any():
        idx = np.where(visible)[0]
        blocked_all = np.ones(idx.size, dtype=bool)
        for cam in cams:
            blocked_all &= _ray_blocked(cloud[idx], cam, np.asarray(hand_points), occlusion_radius)
        visible[idx[blocked_all]] = False

    survivors = np.where(visible)[0]
    if survivors.size == 0:
        dist = np.linalg.norm(cloud[:, None, :] - cams[None, :, :], axis=2).min(axis=1)
        nearest = int(np.argmin(dist))
        points = np.tile(cloud[nearest], (n_out, 1))
        return PartialCloud(points, np.array([nearest]), True)

    m = survivors.size
    if m >= n_out:
        take = np.floor(np.arange(n_out) * m / n_out).astype(int)
    else:
        take = np.arange(n_out) % m
    return PartialCloud(cloud[survivors[take]], survivors, False)


def render_partial_batch(
    world_clouds: np.ndarray,
    hand_points: np.ndarray,
    n_out: int,
    rig: CameraRig = DEFAULT_RIG,
    occlusion_radius: float = 0.015,
    hpr_factor: float = 100.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-environment partial clouds: (E, n_out, 3) plus degenerate flags."""
    n = world_clouds.shape[0]
    out = np.zeros((n, n_out, 3))
    degenerate = np.zeros(n, dtype=bool)
    for i in range(n):
        pc = render_partial_cloud(
            world_clouds[i], hand_points[i], n_out, rig, occlusion_radius, hpr_factor
        )
        out[i] = pc.points
        degenerate[i] = pc.degenerate
    return out, degenerate
