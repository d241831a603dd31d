"""Planar-constrained multi-finger hand: geometry and forward kinematics.

The wrist has 3 DOF (x, z translation, pitch about y). Each of the three
fingers is a 2-link chain whose joints rotate in the wrist's x-z plane;
positive joint angles curl the finger toward the palm center. The thumb
opposes the other two fingers across the x axis, which gives the
attachment heuristic its opposing contact directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotation import rotation_about_y


@dataclass(frozen=True)
class HandModel:
    fingers: int = 3
    joints_per_finger: int = 2
    link_lengths: tuple[tuple[float, float], ...] = ((0.06, 0.05),) * 3
    finger_bases: tuple[tuple[float, float, float], ...] = (
        (-0.06, 0.0, 0.0),
        (0.06, -0.03, 0.0),
        (0.06, 0.03, 0.0),
    )
    curl_signs: tuple[float, ...] = (1.0, -1.0, -1.0)
    palm_points: tuple[tuple[float, float, float], ...] = ((-0.03, 0.0, 0.0), (0.03, 0.0, 0.0))
    joint_low: float = 0.0
    joint_high: float = 1.1
    q_open: tuple[float, ...] = (0.2,) * 6
    wrist_low: tuple[float, float, float] = (-0.4, 0.015, -1.2)
    wrist_high: tuple[float, float, float] = (0.4, 0.6, 1.2)

    def __post_init__(self) -> None:
        if not all(self.joint_low <= v <= self.joint_high for v in self.q_open):
            raise ValueError("q_open violates joint limits")

    @property
    def n_joints(self) -> int:
        return self.fingers * self.joints_per_finger

    @property
    def action_dim(self) -> int:
        return 3 + self.n_joints

    @property
    def n_points(self) -> int:
        return 2 * self.fingers + len(self.palm_points)

    @property
    def q_open_array(self) -> np.ndarray:
        return np.asarray(self.q_open, dtype=float)


DEFAULT_HAND = HandModel()


def local_hand_points(hand: HandModel, q: np.ndarray) -> np.ndarray:
    """Body points in the palm frame for joint angles q (..., n_joints).

    Point order: fingertips (one per finger), then mid-link joints, then
    palm points. Shape (..., K, 3).
    """
    q = np.asarray(q, dtype=float)
    batch = q.shape[:-1]
    tips = np.zeros(batch + (hand.fingers, 3))
    mids = np.zeros(batch + (hand.fingers, 3))
    for f in range(hand.fingers):
        s = hand.curl_signs[f]
        l1, l2 = hand.link_lengths[f]
        a1 = q[..., 2 * f]
        a2 = a1 + q[..., 2 * f + 1]
        base = np.asarray(hand.finger_bases[f])
        d1 = np.stack([s * np.sin(a1), np.zeros_like(a1), -np.cos(a1)], axis=-1)
        d2 = np.stack([s * np.sin(a2), np.zeros_like(a2), -np.cos(a2)], axis=-1)
        mids[..., f, :] = base + l1 * d1
        tips[..., f, :] = mids[..., f, :] + l2 * d2
    palms = np.broadcast_to(
        np.asarray(hand.palm_points, dtype=float), batch + (len(hand.palm_points), 3)
    )
    return np.concatenate([tips, mids, palms], axis=-2)


def world_hand_points(hand: HandModel, wrist: np.ndarray, q: np.ndarray) -> np.ndarray:
    """World-frame body points; wrist is (..., 3) = (x, z, pitch)."""
    wrist = np.asarray(wrist, dtype=float)
    local = local_hand_points(hand, q)
    rot = rotation_about_y(wrist[..., 2])
    rotated = np.einsum("...ij,...kj->...ki", rot, local)
    origin = np.stack(
        [wrist[..., 0], np.zeros_like(wrist[..., 0]), wrist[..., 1]], axis=-1
    )
    return rotated + origin[..., None, :]
