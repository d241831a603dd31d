"""Quasi-static tabletop grasping environment.

Objects rest on the table plane z = 0 and only move when attached to the
hand (rigid-follow) or when falling after a release (constant per-step
drop). Attachment is a deterministic heuristic: at least two fingertips
near the cloud, opposing contact directions, and net closing motion.
Velocities are per-step finite differences.

`GraspEnv` steps many environments of one asset as stacked arrays; the
module-level `reset`/`step` functions expose the one-environment contract
on top of it, so both paths share the same arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assets import ObjectAsset, TabletopPose
from .config import DESK_PROFILE, GROUP_NAMES, DimensionProfile, EnvConfig
from .hand import DEFAULT_HAND, HandModel, world_hand_points
from .rotation import (
    quat_about_y,
    quat_conjugate,
    quat_delta_rotvec,
    quat_multiply,
    quat_to_matrix,
)

TIME_EMBED_BANDS = 14


@dataclass(frozen=True)
class CameraRig:
    """Five fixed depth viewpoints around the table."""

    viewpoints: tuple[tuple[float, float, float], ...] = (
        (0.0, 0.0, 0.55),
        (0.5, 0.0, 0.15),
        (-0.5, 0.0, 0.15),
        (0.0, 0.5, 0.15),
        (0.0, -0.5, 0.15),
    )
    focus: tuple[float, float, float] = (0.0, 0.0, 0.15)

    def __post_init__(self) -> None:
        if len(self.viewpoints) != 5:
            raise ValueError("camera rig must have exactly five viewpoints")

    @property
    def positions(self) -> np.ndarray:
        return np.asarray(self.viewpoints, dtype=float)


DEFAULT_RIG = CameraRig()


@dataclass
class EnvState:
    """Snapshot of one environment (copies, safe to hold across steps)."""

    wrist: np.ndarray               # (3,) x, z, pitch
    wrist_vel: np.ndarray           # (3,)
    q: np.ndarray                   # (n_joints,)
    qvel: np.ndarray                # (n_joints,)
    obj_pos: np.ndarray             # (3,)
    obj_quat: np.ndarray            # (4,)
    obj_linvel: np.ndarray          # (3,)
    obj_angvel: np.ndarray          # (3,)
    grasped: bool
    step: int
    prev_action: np.ndarray         # (action_dim,)
    goal: np.ndarray                # (3,)
    attach_pos: np.ndarray          # (3,) object position in wrist frame
    attach_quat: np.ndarray         # (4,)
    tip_dist: np.ndarray            # (fingers,) fingertip-to-cloud distances
    tips_prev: np.ndarray           # (fingers, 3) fingertip world positions
    clipped: bool = False


class Observation:
    """Named observation groups with profile validation."""

    def __init__(self, groups: dict[str, np.ndarray], profile: DimensionProfile, setting: str):
        order = [g for g in GROUP_NAMES if g in groups]
        expected = dict(zip(GROUP_NAMES, profile.group_dims))
        if setting == "vision":
            expected["object_state"] = profile.vision_object_state
        for name in order:
            got = groups[name].shape[-1]
            if got != expected[name]:
                raise ValueError(
                    f"group {name!r} has length {got}, profile "
                    f"{profile.name!r}/{setting} expects {expected[name]}"
                )
        self.setting = setting
        self.groups = {name: groups[name] for name in order}

    def concat(self) -> np.ndarray:
        return np.concatenate(list(self.groups.values()), axis=-1)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.groups[name]


def time_embedding(t: float | np.ndarray, horizon: int) -> np.ndarray:
    """1 normalized time scalar + 28-d sine-cosine embedding.

    Frequencies are geometric: omega_k = 2*pi*2^(k-1)/2^13 for k = 1..14,
    applied to t/T; each band contributes an interleaved (sin, cos) pair.
    """
    t = np.asarray(t, dtype=float)
    x = t / float(horizon)
    k = np.arange(1, TIME_EMBED_BANDS + 1)
    omega = 2.0 * np.pi * (2.0 ** (k - 1)) / 2.0**13
    phase = x[..., None] * omega
    pairs = np.stack([np.sin(phase), np.cos(phase)], axis=-1).reshape(*x.shape, 2 * TIME_EMBED_BANDS)
    return np.concatenate([x[..., None], pairs], axis=-1)


def min_distances(points: np.ndarray, cloud: np.ndarray) -> np.ndarray:
    """Per query point, the distance to its nearest cloud point."""
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[0] == 0:
        raise ValueError("cloud must be a non-empty (N, 3) array")
    diff = np.asarray(points, dtype=float)[:, None, :] - cloud[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2)).min(axis=1)


class GraspEnv:
    """Vectorized environments for one asset (stacked-array state)."""

    def __init__(
        self,
        asset: ObjectAsset,
        env_cfg: EnvConfig | None = None,
        hand: HandModel | None = None,
        profile: DimensionProfile = DESK_PROFILE,
        n_envs: int = 1,
    ):
        self.asset = asset
        self.cfg = env_cfg or EnvConfig()
        self.hand = hand or DEFAULT_HAND
        self.profile = profile
        self.n = n_envs
        self.goal = np.asarray(self.cfg.goal, dtype=float)
        self._alloc()

    def _alloc(self) -> None:
        n, nj, na = self.n, self.hand.n_joints, self.hand.action_dim
        self.wrist = np.zeros((n, 3))
        self.wrist_prev = np.zeros((n, 3))
        self.q = np.zeros((n, nj))
        self.q_prev = np.zeros((n, nj))
        self.obj_pos = np.zeros((n, 3))
        self.obj_quat = np.tile([1.0, 0, 0, 0], (n, 1))
        self.obj_pos_prev = np.zeros((n, 3))
        self.obj_quat_prev = np.tile([1.0, 0, 0, 0], (n, 1))
        self.grasped = np.zeros(n, dtype=bool)
        self.attach_pos = np.zeros((n, 3))
        self.attach_quat = np.tile([1.0, 0, 0, 0], (n, 1))
        self.step_count = np.zeros(n, dtype=np.int64)
        self.prev_action = np.zeros((n, na))
        self.clipped = np.zeros(n, dtype=bool)
        canon = self.asset.canonical_cloud
        # f32 kernel: ~1e-7 m distance error, far below the 1e-5 replay tolerance
        self._canon_t = np.ascontiguousarray(canon.T, dtype=np.float32)
        self._canon_sq = (canon * canon).sum(axis=1).astype(np.float32)
        self._rot_quat = np.full((n, 4), np.nan)
        self._rot_mats = np.tile(np.eye(3), (n, 1, 1))
        self._rel_minz = np.zeros(n)
        self._world = np.zeros((n, self.asset.n_points, 3))
        self._world_valid = False
        self._hand_pts = np.zeros((n, self.hand.n_points, 3))
        self._dists = np.zeros((n, self.hand.n_points))
        self._nearest = np.zeros((n, self.hand.n_points), dtype=np.int64)
        self._tips_prev = np.zeros((n, self.hand.fingers, 3))

    # -- resets ------------------------------------------------------------

    def reset_envs(self, idx: np.ndarray, poses: list[TabletopPose]) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        if len(idx) != len(poses):
            raise ValueError("one pose per environment index")
        for i, pose in zip(idx, poses):
            self.wrist[i] = (0.0, self.cfg.hand_start_height, 0.0)
            self.wrist_prev[i] = self.wrist[i]
            self.q[i] = self.hand.q_open_array
            self.q_prev[i] = self.q[i]
            self.obj_pos[i] = pose.translation
            self.obj_quat[i] = pose.rotation
            self.obj_pos_prev[i] = self.obj_pos[i]
            self.obj_quat_prev[i] = self.obj_quat[i]
            self.grasped[i] = False
            self.attach_pos[i] = 0.0
            self.attach_quat[i] = (1.0, 0, 0, 0)
            self.step_count[i] = 0
            self.prev_action[i] = 0.0
            self.clipped[i] = False
        self._refresh_world(idx)
        self._refresh_hand(idx)
        self._refresh_dists(idx)
        self._tips_prev[idx] = self._hand_pts[idx, : self.hand.fingers]

    def reset_all(self, poses: list[TabletopPose]) -> None:
        self.reset_envs(np.arange(self.n), poses)

    # -- cached geometry ---------------------------------------------------

    def _ensure_rotation(self, idx: np.ndarray) -> None:
        stale = idx[np.any(self.obj_quat[idx] != self._rot_quat[idx], axis=1)]
        if stale.size:
            mats = quat_to_matrix(self.obj_quat[stale])
            self._rot_mats[stale] = mats
            # min over the cloud of the rotated z coordinate
            self._rel_minz[stale] = (self._canon_t.T @ mats[:, 2, :].T).min(axis=0)
            self._rot_quat[stale] = self.obj_quat[stale]

    def _refresh_world(self, idx: np.ndarray) -> None:
        self._world_valid = False

    def _refresh_hand(self, idx: np.ndarray) -> None:
        self._hand_pts[idx] = world_hand_points(self.hand, self.wrist[idx], self.q[idx])

    def _refresh_dists(self, idx: np.ndarray) -> None:
        """Distances in the object's canonical frame against the shared cloud.

        ||h - (R c + p)|| = ||R^T (h - p) - c||, so one GEMM against the
        canonical cloud covers every environment; sqrt runs after the min.
        """
        self._ensure_rotation(idx)
        k = self.hand.n_points
        local = np.einsum(
            "eij,eki->ekj", self._rot_mats[idx], self._hand_pts[idx] - self.obj_pos[idx, None, :]
        ).astype(np.float32)
        flat = local.reshape(-1, 3)
        d_sq = (flat * flat).sum(axis=1)[:, None] + self._canon_sq[None, :] - 2.0 * (
            flat @ self._canon_t
        )
        nearest = d_sq.argmin(axis=1)
        dmin = np.take_along_axis(d_sq, nearest[:, None], axis=1)[:, 0]
        self._nearest[idx] = nearest.reshape(-1, k)
        self._dists[idx] = np.sqrt(np.maximum(dmin, 0.0, dtype=np.float64)).reshape(-1, k)

    def world_cloud(self) -> np.ndarray:
        if not self._world_valid:
            all_idx = np.arange(self.n)
            self._ensure_rotation(all_idx)
            self._world = (
                np.matmul(self.asset.canonical_cloud[None], np.swapaxes(self._rot_mats, 1, 2))
                + self.obj_pos[:, None, :]
            )
            self._world_valid = True
        return self._world

    def hand_points(self) -> np.ndarray:
        return self._hand_pts

    def distances(self) -> np.ndarray:
        return self._dists

    # -- stepping ----------------------------------------------------------

    def step(self, actions: np.ndarray) -> None:
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n, self.hand.action_dim):
            raise ValueError(
                f"actions shape {actions.shape}, expected {(self.n, self.hand.action_dim)}"
            )
        over = np.abs(actions) > 1.0
        if over.any() and self.cfg.strict_actions:
            raise ValueError("action components outside [-1, 1] in strict mode")
        self.clipped = over.any(axis=1)
        act = np.clip(actions, -1.0, 1.0)

        self.wrist_prev[:] = self.wrist
        self.q_prev[:] = self.q
        self.obj_pos_prev[:] = self.obj_pos
        self.obj_quat_prev[:] = self.obj_quat
        tips_before = self._hand_pts[:, : self.hand.fingers].copy()
        tip_dist_before = self._dists[:, : self.hand.fingers].copy()

        deltas = np.asarray(self.cfg.wrist_deltas)
        self.wrist = self.wrist + act[:, :3] * deltas
        np.clip(self.wrist, self.hand.wrist_low, self.hand.wrist_high, out=self.wrist)
        self.q = self.q + act[:, 3:] * self.cfg.joint_delta
        np.clip(self.q, self.hand.joint_low, self.hand.joint_high, out=self.q)

        moved = np.zeros(self.n, dtype=bool)
        g = self.grasped
        if g.any():
            # rigid-follow, lifting the wrist as needed so no cloud point
            # passes below the table plane
            new_pos, new_quat = self._follow_pose(g)
            mats = quat_to_matrix(new_quat)
            rel_minz = (self.asset.canonical_cloud @ np.swapaxes(mats[:, 2, :], 0, 1)).min(axis=0)
            deficit = np.maximum(0.0, -(new_pos[:, 2] + rel_minz))
            if (deficit > 0).any():
                self.wrist[g, 1] += deficit
                new_pos, new_quat = self._follow_pose(g)
            self.obj_pos[g] = new_pos
            self.obj_quat[g] = new_quat
            moved |= g

        free = ~g
        if free.any():
            free_idx = np.where(free)[0]
            self._ensure_rotation(free_idx)
            height = self.obj_pos[free_idx, 2] + self._rel_minz[free_idx]   # cloud min z
            drop = np.minimum(self.cfg.g_step, np.maximum(height, 0.0))
            falling = drop > 0
            if falling.any():
                self.obj_pos[free_idx[falling], 2] -= drop[falling]
                moved[free_idx[falling]] = True

        if moved.any():
            self._world_valid = False
        self._refresh_hand(np.arange(self.n))
        self._refresh_dists(np.arange(self.n))

        self._update_attachment(tip_dist_before)

        self.step_count += 1
        self.prev_action = act
        self._tips_prev = tips_before

    def _follow_pose(self, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pitch = self.wrist[mask, 2]
        wq = quat_about_y(pitch)
        rel = self.attach_pos[mask]
        rot = np.einsum(
            "bij,bj->bi",
            rotation_matrices_y(pitch),
            rel,
        )
        origin = np.stack(
            [self.wrist[mask, 0], np.zeros(mask.sum()), self.wrist[mask, 1]], axis=-1
        )
        return rot + origin, quat_multiply(wq, self.attach_quat[mask])

    def _update_attachment(self, tip_dist_before: np.ndarray) -> None:
        tips = self._hand_pts[:, : self.hand.fingers]
        tip_dist = self._dists[:, : self.hand.fingers]

        release = self.grasped & (tip_dist > self.cfg.release_factor * self.cfg.attach_distance).all(axis=1)
        self.grasped[release] = False

        candidates = np.where(~self.grasped)[0]
        if candidates.size:
            near = tip_dist[candidates] < self.cfg.attach_distance
            enough = near.sum(axis=1) >= 2
            closing = (tip_dist_before[candidates] - tip_dist[candidates]).mean(axis=1) > 0.0
            check = candidates[enough & closing]
            for i in check:
                if self._opposing(i, tip_dist[i] < self.cfg.attach_distance, tips[i]):
                    self._attach(i)

    def _opposing(self, i: int, near: np.ndarray, tips_i: np.ndarray) -> bool:
        idx = np.where(near)[0]
        dirs = []
        for f in idx:
            point = self._rot_mats[i] @ self.asset.canonical_cloud[self._nearest[i, f]] + self.obj_pos[i]
            v = point - tips_i[f]
            norm = np.linalg.norm(v)
            dirs.append(v / norm if norm > 1e-12 else np.zeros(3))
        cos_max = np.cos(np.deg2rad(self.cfg.opposition_min_angle_deg))
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                if np.dot(dirs[a], dirs[b]) < cos_max:
                    return True
        return False

    def _attach(self, i: int) -> None:
        pitch = self.wrist[i, 2]
        rot_t = rotation_matrices_y(np.asarray([pitch]))[0].T
        origin = np.array([self.wrist[i, 0], 0.0, self.wrist[i, 1]])
        self.attach_pos[i] = rot_t @ (self.obj_pos[i] - origin)
        self.attach_quat[i] = quat_multiply(
            quat_conjugate(quat_about_y(pitch)), self.obj_quat[i]
        )
        self.grasped[i] = True

    # -- views ---------------------------------------------------------------

    def state(self, i: int = 0) -> EnvState:
        return EnvState(
            wrist=self.wrist[i].copy(),
            wrist_vel=(self.wrist[i] - self.wrist_prev[i]),
            q=self.q[i].copy(),
            qvel=(self.q[i] - self.q_prev[i]),
            obj_pos=self.obj_pos[i].copy(),
            obj_quat=self.obj_quat[i].copy(),
            obj_linvel=(self.obj_pos[i] - self.obj_pos_prev[i]),
            obj_angvel=quat_delta_rotvec(self.obj_quat[i], self.obj_quat_prev[i]),
            grasped=bool(self.grasped[i]),
            step=int(self.step_count[i]),
            prev_action=self.prev_action[i].copy(),
            goal=self.goal.copy(),
            attach_pos=self.attach_pos[i].copy(),
            attach_quat=self.attach_quat[i].copy(),
            tip_dist=self._dists[i, : self.hand.fingers].copy(),
            tips_prev=self._tips_prev[i].copy(),
            clipped=bool(self.clipped[i]),
        )

    def load_state(self, i: int, s: EnvState) -> None:
        self.wrist[i] = s.wrist
        self.wrist_prev[i] = s.wrist - s.wrist_vel
        self.q[i] = s.q
        self.q_prev[i] = s.q - s.qvel
        self.obj_pos[i] = s.obj_pos
        self.obj_quat[i] = s.obj_quat
        self.obj_pos_prev[i] = s.obj_pos - s.obj_linvel
        prev_quat = quat_multiply(
            quat_conjugate(_rotvec_quat(s.obj_angvel)), s.obj_quat
        )
        self.obj_quat_prev[i] = prev_quat
        self.grasped[i] = s.grasped
        self.attach_pos[i] = s.attach_pos
        self.attach_quat[i] = s.attach_quat
        self.step_count[i] = s.step
        self.prev_action[i] = s.prev_action
        self.clipped[i] = s.clipped
        idx = np.asarray([i])
        self._refresh_world(idx)
        self._refresh_hand(idx)
        self._refresh_dists(idx)
        self._tips_prev[i] = s.tips_prev

    # -- observations --------------------------------------------------------

    def observe_groups(
        self,
        setting: str = "specialist",
        encoder=None,
        partial_clouds: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Observation groups as (n_envs, dim) arrays.

        setting: "specialist" (no feature group), "state", or "vision".
        state/vision need `encoder` (an object with .encode_batch); vision
        additionally needs per-env partial clouds (n, P, 3).
        """
        tips = self._hand_pts[:, : self.hand.fingers]
        tip_vel = tips - self._tips_prev
        proprio = np.concatenate(
            [
                self.wrist,
                self.wrist - self.wrist_prev,
                self.q,
                self.q - self.q_prev,
                tips.reshape(self.n, -1),
                tip_vel[:, :, [0, 2]].reshape(self.n, -1),
            ],
            axis=1,
        )
        time_group = time_embedding(self.step_count.astype(float), self.cfg.horizon)
        groups: dict[str, np.ndarray] = {
            "proprioception": proprio,
            "prev_action": self.prev_action.copy(),
        }

        if setting in ("specialist", "state"):
            angvel = quat_delta_rotvec(self.obj_quat, self.obj_quat_prev)
            groups["object_state"] = np.concatenate(
                [
                    self.obj_pos,
                    self.obj_quat,
                    self.obj_pos - self.obj_pos_prev,
                    angvel,
                    self.goal[None, :] - self.obj_pos,
                ],
                axis=1,
            )
            groups["hand_object_dist"] = self._dists.copy()
            if setting == "state":
                if encoder is None:
                    raise ValueError("state setting needs an encoder")
                centered = self._world - self._world.mean(axis=1, keepdims=True)
                groups["object_feature"] = encoder.encode_batch(centered)
        elif setting == "vision":
            if encoder is None or partial_clouds is None:
                raise ValueError("vision setting needs an encoder and partial clouds")
            from .vision import pca_axes  # local import to avoid a cycle

            centers = partial_clouds.mean(axis=1)
            axes = np.stack([pca_axes(pc).axes for pc in partial_clouds])
            groups["object_state"] = np.concatenate(
                [centers, axes.reshape(self.n, 9)], axis=1
            )
            diff = self._hand_pts[:, :, None, :] - partial_clouds[:, None, :, :]
            groups["hand_object_dist"] = np.sqrt((diff * diff).sum(axis=3)).min(axis=2)
            centered = partial_clouds - centers[:, None, :]
            groups["object_feature"] = encoder.encode_batch(centered)
        else:
            raise ValueError(f"unknown setting {setting!r}")

        groups["time"] = time_group
        if "object_feature" in groups:
            expected = self.profile.latent_dim
            got = groups["object_feature"].shape[-1]
            if got != expected:
                raise ValueError(
                    f"encoder latent dim {got} does not match profile feature slot {expected}"
                )
        return {name: groups[name] for name in GROUP_NAMES if name in groups}

    def observe(self, setting: str = "specialist", encoder=None, partial_clouds=None) -> Observation:
        return Observation(
            self.observe_groups(setting, encoder, partial_clouds), self.profile, setting
        )

    def success(self, lambda_g: float = 0.05) -> np.ndarray:
        dist = np.linalg.norm(self.obj_pos - self.goal[None, :], axis=1)
        return dist < lambda_g

    def at_horizon(self) -> np.ndarray:
        return self.step_count >= self.cfg.horizon


def rotation_matrices_y(pitch: np.ndarray) -> np.ndarray:
    from .rotation import rotation_about_y

    return rotation_about_y(np.asarray(pitch, dtype=float))


def _rotvec_quat(v: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = v / angle
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


# ---------------------------------------------------------------------------
# single-environment contract


def reset(
    asset: ObjectAsset,
    pose: TabletopPose,
    env_cfg: EnvConfig | None = None,
    hand: HandModel | None = None,
) -> EnvState:
    env = GraspEnv(asset, env_cfg, hand, n_envs=1)
    env.reset_all([pose])
    return env.state(0)


def step(
    state: EnvState,
    action: np.ndarray,
    asset: ObjectAsset,
    env_cfg: EnvConfig | None = None,
    hand: HandModel | None = None,
) -> EnvState:
    env = GraspEnv(asset, env_cfg, hand, n_envs=1)
    env.load_state(0, state)
    env.step(np.asarray(action, dtype=float)[None, :])
    return env.state(0)


def hand_points(state: EnvState, hand: HandModel | None = None) -> np.ndarray:
    return world_hand_points(hand or DEFAULT_HAND, state.wrist, state.q)


def observe(
    state: EnvState,
    asset: ObjectAsset,
    setting: str = "specialist",
    encoder=None,
    partial_cloud: np.ndarray | None = None,
    env_cfg: EnvConfig | None = None,
    hand: HandModel | None = None,
    profile: DimensionProfile = DESK_PROFILE,
) -> Observation:
    """Single-state observation via the same arithmetic as the batched env."""
    env = GraspEnv(asset, env_cfg, hand, profile, n_envs=1)
    env.load_state(0, state)
    partials = None if partial_cloud is None else partial_cloud[None]
    return env.observe(setting, encoder, partials)


def is_success(
    state: EnvState,
    lambda_g: float = 0.05,
    horizon: int = 200,
    strict: bool = True,
) -> bool:
    """True iff the object sits within lambda_g of the goal at the final step."""
    if strict and state.step != horizon:
        raise ValueError(f"success queried at step {state.step}, horizon {horizon}")
    return bool(np.linalg.norm(state.obj_pos - state.goal) < lambda_g)
