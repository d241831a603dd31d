"""Successful-trajectory harvesting and the UGTR binary container.

One .ugtr file holds all records of one asset. Records store per-step raw
observation groups (state layout, feature slot empty), actions and partial
clouds, plus the initial world-frame complete cloud once. Everything else
(per-step object poses, features, hand points) is recomputable: stored
observations embed the object pose and wrist/joint state, and replaying
the stored actions through the simulator reproduces them to 1e-5.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assets import ObjectAsset, TabletopPose, sample_tabletop_pose
from .config import ExperimentConfig
from .hand import DEFAULT_HAND, HandModel
from .sim import GraspEnv
from .vision import render_partial_batch

MAGIC = b"UGTR"
VERSION = 1
FLAG_SAMPLED_ACTIONS = 1

STORED_GROUPS = ("proprioception", "prev_action", "object_state", "hand_object_dist", "time")


class TrajectoryFormatError(ValueError):
    """Raised for bad magic/version, truncation, or checksum mismatches."""


class UnderYieldError(RuntimeError):
    """Raised when an asset cannot produce enough successful trajectories."""


@dataclass
class TrajectoryRecord:
    asset_id: int
    pose_seed: int
    horizon: int
    action_dim: int
    group_dims: tuple[int, int, int, int, int, int]   # feature slot is 0
    observations: dict[str, np.ndarray]               # each (T, dim) float32
    actions: np.ndarray                               # (T, action_dim) float32
    partial_clouds: np.ndarray                        # (T, n_out, 3) float32
    complete_cloud: np.ndarray                        # (N, 3) float32, initial world frame
    success: bool
    policy_checksum: int

    @property
    def n_partial(self) -> int:
        return self.partial_clouds.shape[1]

    @property
    def n_complete(self) -> int:
        return self.complete_cloud.shape[0]

    def object_pose_at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(position, quaternion) at step t, read from the stored object state."""
        state = self.observations["object_state"][t].astype(float)
        return state[:3], state[3:7]

    def wrist_q_at(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        prop = self.observations["proprioception"][t].astype(float)
        return prop[:3], prop[6:12]


def record_payload_size(rec: TrajectoryRecord) -> int:
    """Closed-form byte size of one serialized record."""
    per_step = sum(rec.group_dims) + rec.action_dim + rec.n_partial * 3
    floats = rec.n_complete * 3 + rec.horizon * per_step
    header = 8 + 2 + 2 + 6 * 2 + 4 + 4 + 1 + 8
    return header + 4 * floats


# ---------------------------------------------------------------------------
# binary io


def _pack_record(rec: TrajectoryRecord) -> bytes:
    head = struct.pack(
        "<QHH6HIIBQ",
        rec.pose_seed,
        rec.horizon,
        rec.action_dim,
        *rec.group_dims,
        rec.n_partial,
        rec.n_complete,
        1 if rec.success else 0,
        rec.policy_checksum,
    )
    step_blocks = [rec.observations[g].astype("<f4") for g in STORED_GROUPS]
    per_step = np.concatenate(
        step_blocks + [rec.actions.astype("<f4"), rec.partial_clouds.reshape(rec.horizon, -1).astype("<f4")],
        axis=1,
    )
    return head + rec.complete_cloud.astype("<f4").tobytes() + per_step.tobytes()


def _unpack_record(blob: bytes, offset: int, asset_id: int) -> tuple[TrajectoryRecord, int]:
    head_fmt = "<QHH6HIIBQ"
    head_size = struct.calcsize(head_fmt)
    if offset + head_size > len(blob):
        raise TrajectoryFormatError("truncated record header")
    fields = struct.unpack_from(head_fmt, blob, offset)
    pose_seed, horizon, action_dim = fields[0], fields[1], fields[2]
    group_dims = tuple(fields[3:9])
    n_partial, n_complete, success, checksum = fields[9], fields[10], fields[11], fields[12]
    offset += head_size

    n_complete_floats = n_complete * 3
    end = offset + 4 * n_complete_floats
    if end > len(blob):
        raise TrajectoryFormatError("truncated complete cloud")
    complete = np.frombuffer(blob[offset:end], dtype="<f4").reshape(n_complete, 3)
    offset = end

    per_step = sum(group_dims) + action_dim + n_partial * 3
    end = offset + 4 * per_step * horizon
    if end > len(blob):
        raise TrajectoryFormatError("truncated step data")
    steps = np.frombuffer(blob[offset:end], dtype="<f4").reshape(horizon, per_step)
    offset = end

    dims = [group_dims[0], group_dims[1], group_dims[2], group_dims[4], group_dims[5]]
    bounds = np.cumsum([0] + dims)
    observations = {
        name: steps[:, lo:hi].copy()
        for name, lo, hi in zip(STORED_GROUPS, bounds[:-1], bounds[1:])
    }
    cursor = bounds[-1]
    actions = steps[:, cursor : cursor + action_dim].copy()
    cursor += action_dim
    partial = steps[:, cursor:].reshape(horizon, n_partial, 3).copy()
    rec = TrajectoryRecord(
        asset_id=asset_id,
        pose_seed=pose_seed,
        horizon=horizon,
        action_dim=action_dim,
        group_dims=group_dims,
        observations=observations,
        actions=actions,
        partial_clouds=partial,
        complete_cloud=complete.copy(),
        success=bool(success),
        policy_checksum=checksum,
    )
    return rec, offset


def write_file(path: str | Path, records: list[TrajectoryRecord], flags: int = 0) -> list[int]:
    """Write one asset's records; returns per-record byte offsets."""
    if not records:
        raise ValueError("no records to write")
    asset_ids = {rec.asset_id for rec in records}
    if len(asset_ids) != 1:
        raise ValueError(f"records span multiple assets: {sorted(asset_ids)}")
    header = MAGIC + struct.pack("<HHII", VERSION, flags, records[0].asset_id, len(records))
    offsets = []
    chunks = [header]
    cursor = len(header)
    for rec in records:
        offsets.append(cursor)
        blob = _pack_record(rec)
        chunks.append(blob)
        cursor += len(blob)
    Path(path).write_bytes(b"".join(chunks))
    return offsets


def read_file(path: str | Path) -> list[TrajectoryRecord]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise TrajectoryFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, flags, asset_id, count = struct.unpack_from("<HHII", blob, 4)
    if version != VERSION:
        raise TrajectoryFormatError(f"{path}: unsupported version {version}")
    offset = 4 + struct.calcsize("<HHII")
    records = []
    for _ in range(count):
        rec, offset = _unpack_record(blob, offset, asset_id)
        records.append(rec)
    if offset != len(blob):
        raise TrajectoryFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return records


def read_record_at(path: str | Path, offset: int, asset_id: int) -> TrajectoryRecord:
    blob = Path(path).read_bytes()
    rec, _ = _unpack_record(blob, offset, asset_id)
    return rec


def _file_checksum(path: Path) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class IndexEntry:
    file: str
    count: int
    offsets: list[int]
    checksum: str


class DatasetIndex:
    """Maps asset ids to trajectory files with per-record offsets."""

    def __init__(self, root: Path, entries: dict[int, IndexEntry], partition_seed: int):
        self.root = Path(root)
        self.entries = entries
        self.partition_seed = partition_seed
        for entry in entries.values():
            offs = entry.offsets
            if any(b <= a for a, b in zip(offs, offs[1:])):
                raise TrajectoryFormatError("record offsets must be strictly increasing")
        self._flat = [
            (asset_id, i) for asset_id in sorted(entries) for i in range(entries[asset_id].count)
        ]

    @property
    def total_records(self) -> int:
        return len(self._flat)

    def asset_ids(self) -> list[int]:
        return sorted(self.entries)

    def load_record(self, asset_id: int, i: int) -> TrajectoryRecord:
        entry = self.entries[asset_id]
        return read_record_at(self.root / entry.file, entry.offsets[i], asset_id)

    def load_all(self, asset_id: int) -> list[TrajectoryRecord]:
        return read_file(self.root / self.entries[asset_id].file)

    def verify_checksums(self) -> None:
        for asset_id, entry in self.entries.items():
            actual = _file_checksum(self.root / entry.file)
            if actual != entry.checksum:
                raise TrajectoryFormatError(
                    f"checksum mismatch for asset {asset_id}: {actual} != {entry.checksum}"
                )

    def save(self) -> Path:
        payload = {
            "partition_seed": self.partition_seed,
            "assets": {
                str(aid): {
                    "file": e.file,
                    "count": e.count,
                    "offsets": e.offsets,
                    "checksum": e.checksum,
                }
                for aid, e in self.entries.items()
            },
        }
        path = self.root / "index.json"
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return path

    @staticmethod
    def load(root: str | Path) -> "DatasetIndex":
        root = Path(root)
        payload = json.loads((root / "index.json").read_text())
        entries = {
            int(aid): IndexEntry(e["file"], e["count"], list(e["offsets"]), e["checksum"])
            for aid, e in payload["assets"].items()
        }
        return DatasetIndex(root, entries, payload["partition_seed"])


def sample_batch(
    index: DatasetIndex, batch_trajectories: int, rng: np.random.Generator
) -> list[TrajectoryRecord]:
    """Uniform trajectory sample across the pooled dataset (all assets)."""
    if index.total_records == 0:
        raise ValueError("empty trajectory dataset")
    picks = rng.integers(0, index.total_records, size=batch_trajectories)
    return [index.load_record(*index._flat[p]) for p in picks]


# ---------------------------------------------------------------------------
# generation


def generate_records(
    policy,
    asset: ObjectAsset,
    generation_poses: list[TabletopPose],
    m: int,
    cfg: ExperimentConfig,
    seed: int,
    retry_budget: int | None = None,
    hand: HandModel | None = None,
    sample_actions: bool = False,
    batch_envs: int = 32,
) -> tuple[list[TrajectoryRecord], int]:
    """Roll the specialist on random generation poses, keep M successes.

    Deterministic mean actions by default. Raises UnderYieldError if fewer
    than M successes appear within retry_budget * M attempts.
    """
    hand = hand or DEFAULT_HAND
    profile = cfg.dims
    budget = (retry_budget or cfg.eval.retry_budget) * m
    rng = np.random.default_rng(np.random.SeedSequence((seed, asset.asset_id, 9102)))
    checksum = policy.checksum()
    horizon = cfg.env.horizon

    records: list[TrajectoryRecord] = []
    attempts = 0
    # batch size never depends on m, so a smaller-M run is an exact prefix
    # of a larger one under the same seed
    while len(records) < m and attempts < budget:
        batch = min(batch_envs, budget - attempts)
        pose_ids = rng.integers(0, len(generation_poses), size=batch)
        poses = [generation_poses[int(i)] for i in pose_ids]
        env = GraspEnv(asset, cfg.env, hand, profile, n_envs=batch)
        env.reset_all(poses)
        complete0 = env.world_cloud().astype(np.float32).copy()

        obs_steps: list[dict[str, np.ndarray]] = []
        act_steps = np.zeros((horizon, batch, profile.action_dim), dtype=np.float32)
        partial_steps = np.zeros((horizon, batch, profile.partial_points, 3), dtype=np.float32)
        noise_rng = np.random.default_rng(rng.integers(2**63)) if sample_actions else None
        for t in range(horizon):
            groups = env.observe_groups("specialist")
            obs_steps.append({k: v.astype(np.float32) for k, v in groups.items()})
            partial, _ = render_partial_batch(
                env.world_cloud(),
                env.hand_points(),
                profile.partial_points,
                occlusion_radius=cfg.env.occlusion_radius,
                hpr_factor=cfg.env.hpr_radius_factor,
            )
            partial_steps[t] = partial.astype(np.float32)
            obs_flat = np.concatenate(list(groups.values()), axis=1)
            actions = policy.act_mean(obs_flat)
            if noise_rng is not None:
                actions = actions + np.exp(policy.store["log_std"].data) * noise_rng.standard_normal(
                    actions.shape
                )
            act_steps[t] = actions
            env.step(actions)
        wins = env.success(cfg.reward.lambda_g)
        attempts += batch
        for i in range(batch):
            if not wins[i] or len(records) >= m:
                continue
            observations = {
                name: np.stack([obs_steps[t][name][i] for t in range(horizon)])
                for name in STORED_GROUPS
            }
            gd = profile.group_dims_for("specialist")
            records.append(
                TrajectoryRecord(
                    asset_id=asset.asset_id,
                    pose_seed=poses[i].seed,
                    horizon=horizon,
                    action_dim=profile.action_dim,
                    group_dims=(gd[0], gd[1], gd[2], 0, gd[3], gd[4]),
                    observations=observations,
                    actions=act_steps[:, i],
                    partial_clouds=partial_steps[:, i],
                    complete_cloud=complete0[i],
                    success=True,
                    policy_checksum=checksum,
                )
            )
    if len(records) < m:
        raise UnderYieldError(
            f"asset {asset.asset_id}: only {len(records)}/{m} successes in {attempts} attempts"
        )
    return records, attempts


def generate_trajectories(
    policy,
    asset: ObjectAsset,
    generation_poses: list[TabletopPose],
    m: int,
    cfg: ExperimentConfig,
    seed: int,
    out_dir: str | Path,
    retry_budget: int | None = None,
    hand: HandModel | None = None,
    sample_actions: bool = False,
    batch_envs: int = 32,
) -> tuple[Path, int]:
    """Generate, persist, and index M successful trajectories for one asset."""
    records, attempts = generate_records(
        policy, asset, generation_poses, m, cfg, seed, retry_budget, hand,
        sample_actions, batch_envs,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    filename = f"asset_{asset.asset_id}.ugtr"
    path = out_dir / filename
    flags = FLAG_SAMPLED_ACTIONS if sample_actions else 0
    offsets = write_file(path, records, flags)
    entry = IndexEntry(filename, len(records), offsets, _file_checksum(path))

    index_path = out_dir / "index.json"
    if index_path.exists():
        index = DatasetIndex.load(out_dir)
        index.entries[asset.asset_id] = entry
        index = DatasetIndex(out_dir, index.entries, index.partition_seed)
    else:
        index = DatasetIndex(out_dir, {asset.asset_id: entry}, seed)
    index.save()
    return path, attempts


# ---------------------------------------------------------------------------
# replay validation


def replay_record(
    rec: TrajectoryRecord,
    asset: ObjectAsset,
    cfg: ExperimentConfig,
    hand: HandModel | None = None,
) -> float:
    """Max absolute deviation between stored and replayed observations."""
    hand = hand or DEFAULT_HAND
    pose = sample_tabletop_pose(asset, rec.pose_seed, cfg.env.pose_disk_radius)
    env = GraspEnv(asset, cfg.env, hand, cfg.dims, n_envs=1)
    env.reset_all([pose])
    worst = 0.0
    for t in range(rec.horizon):
        groups = env.observe_groups("specialist")
        for name in STORED_GROUPS:
            dev = float(np.abs(groups[name][0].astype(np.float32) - rec.observations[name][t]).max())
            worst = max(worst, dev)
        env.step(rec.actions[t].astype(float)[None, :])
    return worst


def replayed_states(
    rec: TrajectoryRecord,
    asset: ObjectAsset,
    cfg: ExperimentConfig,
    hand: HandModel | None = None,
) -> list:
    """Per-step EnvState sequence (pre-action states) for pair building."""
    hand = hand or DEFAULT_HAND
    pose = sample_tabletop_pose(asset, rec.pose_seed, cfg.env.pose_disk_radius)
    env = GraspEnv(asset, cfg.env, hand, cfg.dims, n_envs=1)
    env.reset_all([pose])
    states = []
    for t in range(rec.horizon):
        states.append(env.state(0))
        env.step(rec.actions[t].astype(float)[None, :])
    return states
