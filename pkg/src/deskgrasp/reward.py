"""Contact-gated grasp reward.

R = R_d + (1 - f_c) * R_o + f_c * (R_l + R_g + R_s)

R_d penalizes the mean nearest-point distance from the hand body points to
the object cloud (or to the object center under the rd_target="center"
variant; the contact gate f_c uses the same distance measure). R_o keeps
the hand near its opening pose until contact, R_l pays for commanded
wrist lift, R_g pulls the object toward the goal, and R_s is the success
bonus inside the goal radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assets import ObjectAsset
from .config import RewardConfig
from .hand import DEFAULT_HAND, HandModel, world_hand_points
from .rotation import quat_rotate
from .sim import EnvState, min_distances


@dataclass(frozen=True)
class RewardTerms:
    total: np.ndarray
    r_d: np.ndarray
    f_c: np.ndarray
    r_o: np.ndarray
    r_l: np.ndarray
    r_g: np.ndarray
    r_s: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "R_d": self.r_d,
            "f_c": self.f_c,
            "R_o": self.r_o,
            "R_l": self.r_l,
            "R_g": self.r_g,
            "R_s": self.r_s,
        }


def reward_terms(
    mean_dist: np.ndarray,
    q_dev: np.ndarray,
    a_z: np.ndarray,
    goal_dist: np.ndarray,
    cfg: RewardConfig,
) -> RewardTerms:
    """Vectorized reward arithmetic on precomputed distance scalars.

    mean_dist: mean hand-point distance (to cloud or center per rd_target),
    q_dev: ||q - q_open||_2, a_z: commanded wrist-z action in [-1, 1],
    goal_dist: ||x_obj - x_goal||_2.
    """
    mean_dist = np.asarray(mean_dist, dtype=float)
    r_d = -cfg.omega_d * mean_dist
    f_c = (mean_dist < cfg.lambda_c).astype(float)
    r_o = -cfg.omega_o * np.asarray(q_dev, dtype=float) if cfg.use_ro else np.zeros_like(mean_dist)
    r_l = cfg.omega_l * (1.0 + np.asarray(a_z, dtype=float))
    r_g = -cfg.omega_g * np.asarray(goal_dist, dtype=float)
    r_s = cfg.omega_s * (np.asarray(goal_dist, dtype=float) < cfg.lambda_g).astype(float)
    total = r_d + (1.0 - f_c) * r_o + f_c * (r_l + r_g + r_s)
    return RewardTerms(total, r_d, f_c, r_o, r_l, r_g, r_s)


def compute_reward(
    state_before: EnvState,
    action: np.ndarray,
    state_after: EnvState,
    cfg: RewardConfig,
    asset: ObjectAsset,
    hand: HandModel | None = None,
    wrist_delta_z: float = 0.01,
) -> tuple[float, dict[str, float]]:
    """Single-transition reward; distances are taken from state_after."""
    hand = hand or DEFAULT_HAND
    points = world_hand_points(hand, state_after.wrist, state_after.q)
    if cfg.rd_target == "center":
        mean_dist = float(np.linalg.norm(points - state_after.obj_pos, axis=1).mean())
    else:
        cloud = quat_rotate(state_after.obj_quat, asset.canonical_cloud) + state_after.obj_pos
        mean_dist = float(min_distances(points, cloud).mean())
    q_dev = float(np.linalg.norm(state_after.q - hand.q_open_array))
    action = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    if cfg.lift_source == "action":
        a_z = float(action[1])
    else:
        a_z = float((state_after.wrist[1] - state_before.wrist[1]) / wrist_delta_z)
    goal_dist = float(np.linalg.norm(state_after.obj_pos - state_after.goal))
    terms = reward_terms(
        np.asarray([mean_dist]), np.asarray([q_dev]), np.asarray([a_z]), np.asarray([goal_dist]), cfg
    )
    components = {k: float(v[0]) for k, v in terms.as_dict().items()}
    return float(terms.total[0]), components
