"""Universal grasp network: six group tokenizers, a self-attention stack,
and a concatenation head, distilled offline from specialist trajectories.

Each observation group maps through its own single-layer (affine)
tokenizer; the token sequence runs through K pre-layernorm self-attention
blocks, is concatenated in fixed group order, and a 4-layer MLP head emits
the action. Input-group ablations zero the group's values instead of
changing shapes, so compared variants share one architecture.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .config import GROUP_NAMES, PROFILES, DimensionProfile, ExperimentConfig
from .hand import DEFAULT_HAND, HandModel, world_hand_points
from .nn import (
    ParameterStore,
    Tensor,
    adam_step,
    attention_block_forward,
    init_attention_block,
    init_mlp,
    l2_row_mean,
    mlp_forward,
)
from .nn import tensor as T
from .rotation import quat_to_matrix
from .vision import pca_axes_batch

SETTING_CODES = {"state": 0.0, "vision": 1.0}
ESTIMATION_CODES = {"none": 0.0, "center": 1.0, "center_pca": 2.0}


class TrainingDiverged(RuntimeError):
    pass


class UniversalPolicy:
    """Tokenize -> K attention blocks -> concat -> MLP head."""

    def __init__(
        self,
        profile: DimensionProfile,
        setting: str = "state",
        blocks: int = 12,
        seed: int = 0,
        input_mask: tuple[str, ...] = GROUP_NAMES,
        vision_estimation: str = "center_pca",
        dtype=np.float32,
    ):
        if setting not in SETTING_CODES:
            raise ValueError(f"setting must be state|vision, got {setting!r}")
        self.profile = profile
        self.setting = setting
        self.blocks = blocks
        self.input_mask = tuple(input_mask)
        self.vision_estimation = vision_estimation
        self.group_dims = profile.group_dims_for(setting)
        self.bounds = np.cumsum([0, *self.group_dims])
        self.obs_dim = int(self.bounds[-1])
        self.store = ParameterStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        for i, dim in enumerate(self.group_dims):
            init_mlp(self.store, f"tok{i}", [dim, profile.token_dim], rng)
        for k in range(blocks):
            init_attention_block(self.store, f"blk{k}", profile.token_dim, rng)
        init_mlp(
            self.store,
            "head",
            [6 * profile.token_dim, *profile.head_widths, profile.action_dim],
            rng,
        )

    # -- observation plumbing ------------------------------------------------

    def split_groups(self, obs: np.ndarray) -> dict[str, np.ndarray]:
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"obs width {obs.shape[-1]}, expected {self.obs_dim}")
        return {
            name: obs[..., lo:hi]
            for name, lo, hi in zip(GROUP_NAMES, self.bounds[:-1], self.bounds[1:])
        }

    def _prepare_group(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=self.store.dtype)
        if name not in self.input_mask:
            return np.zeros_like(value)
        if self.setting == "vision" and name == "object_state":
            if self.vision_estimation == "none":
                return np.zeros_like(value)
            if self.vision_estimation == "center":
                out = value.copy()
                out[..., 3:] = 0.0
                return out
        return value

    # -- forward -------------------------------------------------------------

    def forward_groups(self, groups: dict[str, np.ndarray]) -> Tensor:
        first = next(iter(groups.values()))
        b = first.shape[0]
        tokens = []
        for i, name in enumerate(GROUP_NAMES):
            g = self._prepare_group(name, groups[name])
            if g.shape[-1] != self.group_dims[i]:
                raise ValueError(
                    f"group {name!r} width {g.shape[-1]}, expected {self.group_dims[i]}"
                )
            tok = mlp_forward(self.store, f"tok{i}", Tensor(g))
            tokens.append(T.reshape(tok, (b, 1, self.profile.token_dim)))
        x = T.concat(tokens, axis=1)
        for k in range(self.blocks):
            x = attention_block_forward(self.store, f"blk{k}", x)
        flat = T.reshape(x, (b, 6 * self.profile.token_dim))
        return mlp_forward(self.store, "head", flat)

    def forward(self, obs: np.ndarray) -> Tensor:
        return self.forward_groups(self.split_groups(np.asarray(obs, dtype=self.store.dtype)))

    def act(self, groups: dict[str, np.ndarray]) -> np.ndarray:
        return self.forward_groups(groups).data

    # -- bookkeeping -----------------------------------------------------------

    def shape_report(self) -> dict:
        return {
            "profile": self.profile.name,
            "setting": self.setting,
            "tokens": 6,
            "token_dim": self.profile.token_dim,
            "blocks": self.blocks,
            "group_dims": list(self.group_dims),
            "head_input": 6 * self.profile.token_dim,
            "action_dim": self.profile.action_dim,
            "parameters": self.store.parameter_count(),
        }

    def checksum(self) -> int:
        return self.store.checksum()

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.store.arrays())
        arrays["meta.kind"] = np.asarray([1.0])
        arrays["meta.setting"] = np.asarray([SETTING_CODES[self.setting]])
        arrays["meta.blocks"] = np.asarray([float(self.blocks)])
        arrays["meta.profile"] = np.asarray([0.0 if self.profile.name == "desk" else 1.0])
        arrays["meta.input_mask"] = np.asarray(
            [1.0 if name in self.input_mask else 0.0 for name in GROUP_NAMES]
        )
        arrays["meta.vision_estimation"] = np.asarray(
            [ESTIMATION_CODES[self.vision_estimation]]
        )
        return arrays

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "UniversalPolicy":
        if int(arrays["meta.kind"][0]) != 1:
            raise ValueError("checkpoint is not a universal policy")
        profile = PROFILES["desk" if int(arrays["meta.profile"][0]) == 0 else "paper-dims"]
        setting = "state" if int(arrays["meta.setting"][0]) == 0 else "vision"
        mask = tuple(
            name for name, bit in zip(GROUP_NAMES, arrays["meta.input_mask"]) if bit > 0.5
        )
        estimation = {v: k for k, v in ESTIMATION_CODES.items()}[
            float(arrays["meta.vision_estimation"][0])
        ]
        model = UniversalPolicy(
            profile, setting, int(arrays["meta.blocks"][0]), 0, mask, estimation
        )
        model.store.load_arrays(
            {k: v for k, v in arrays.items() if not k.startswith("meta.")}
        )
        return model


# ---------------------------------------------------------------------------
# training pairs


def build_training_pair(
    record,
    t: int,
    setting: str,
    profile: DimensionProfile,
    s_encoder=None,
    v_encoder=None,
    asset=None,
    hand: HandModel | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """One (observation groups, action target) pair from a stored record."""
    groups, actions = build_record_pairs(
        record, setting, profile, s_encoder, v_encoder, asset, hand
    )
    return {name: value[t] for name, value in groups.items()}, actions[t]


def build_record_pairs(
    record,
    setting: str,
    profile: DimensionProfile,
    s_encoder=None,
    v_encoder=None,
    asset=None,
    hand: HandModel | None = None,
    feature_cache: dict | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """All T pairs of one record, as (T, dim) group arrays plus actions."""
    hand = hand or DEFAULT_HAND
    obs = record.observations
    horizon = record.horizon
    groups: dict[str, np.ndarray] = {
        "proprioception": obs["proprioception"].astype(np.float32),
        "prev_action": obs["prev_action"].astype(np.float32),
        "time": obs["time"].astype(np.float32),
    }
    if setting == "state":
        if s_encoder is None or asset is None:
            raise ValueError("state pairs need the state encoder and the asset")
        groups["object_state"] = obs["object_state"].astype(np.float32)
        groups["hand_object_dist"] = obs["hand_object_dist"].astype(np.float32)
        canon = asset.canonical_cloud - asset.canonical_cloud.mean(axis=0)
        quats = obs["object_state"][:, 3:7].astype(np.float64)
        features = np.zeros((horizon, s_encoder.latent_dim), dtype=np.float32)
        pending: dict[bytes, list[int]] = {}
        for t in range(horizon):
            key = quats[t].astype(np.float32).tobytes()
            if feature_cache is not None and (record.asset_id, key) in feature_cache:
                features[t] = feature_cache[(record.asset_id, key)]
            else:
                pending.setdefault(key, []).append(t)
        if pending:
            keys = list(pending)
            stack = np.stack(
                [canon @ quat_to_matrix(quats[pending[k][0]]).T for k in keys]
            ).astype(np.float32)
            encoded = s_encoder.encode_batch(stack)
            for k, z in zip(keys, encoded):
                for t in pending[k]:
                    features[t] = z
                if feature_cache is not None:
                    feature_cache[(record.asset_id, k)] = z
        groups["object_feature"] = features
    elif setting == "vision":
        if v_encoder is None:
            raise ValueError("vision pairs need the vision encoder")
        partial = record.partial_clouds.astype(np.float64)
        centers = partial.mean(axis=1)
        axes = pca_axes_batch(partial)
        groups["object_state"] = np.concatenate(
            [centers, axes.reshape(horizon, 9)], axis=1
        ).astype(np.float32)
        prop = obs["proprioception"].astype(np.float64)
        hand_pts = world_hand_points(hand, prop[:, 0:3], prop[:, 6:12])
        diff = hand_pts[:, :, None, :] - partial[:, None, :, :]
        groups["hand_object_dist"] = (
            np.sqrt((diff * diff).sum(axis=3)).min(axis=2).astype(np.float32)
        )
        centered = (partial - centers[:, None, :]).astype(np.float32)
        groups["object_feature"] = v_encoder.encode_batch(centered)
    else:
        raise ValueError(f"unknown setting {setting!r}")
    ordered = {name: groups[name] for name in GROUP_NAMES}
    return ordered, record.actions.astype(np.float32)


# ---------------------------------------------------------------------------
# trainer


def _precompute_pairs(
    index,
    setting: str,
    profile: DimensionProfile,
    encoders: dict,
    assets_by_id: dict,
    hand: HandModel | None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flattened (record -> pair rows) tensors, deduplicated by pose seed.

    Returns (obs (D, T, obs_dim), actions (D, T, A), row map (R,)) where
    records sharing (asset, pose_seed) map to one deduplicated row.
    """
    dedup: dict[tuple[int, int], int] = {}
    rows = np.zeros(index.total_records, dtype=np.int64)
    obs_chunks: list[np.ndarray] = []
    act_chunks: list[np.ndarray] = []
    feature_cache: dict = {}
    for r, (asset_id, i) in enumerate(index._flat):
        rec = index.load_record(asset_id, i)
        key = (asset_id, rec.pose_seed)
        if key in dedup:
            rows[r] = dedup[key]
            continue
        groups, actions = build_record_pairs(
            rec,
            setting,
            profile,
            encoders.get("S"),
            encoders.get("V"),
            assets_by_id.get(asset_id),
            hand,
            feature_cache,
        )
        obs_chunks.append(np.concatenate(list(groups.values()), axis=1))
        act_chunks.append(actions)
        dedup[key] = len(obs_chunks) - 1
        rows[r] = dedup[key]
    return np.stack(obs_chunks), np.stack(act_chunks), rows


def train_universal(
    index,
    setting: str,
    cfg: ExperimentConfig,
    encoders: dict,
    assets: list,
    seed: int,
    metrics_path: str | Path | None = None,
    hand: HandModel | None = None,
) -> tuple[UniversalPolicy, list[float]]:
    """Offline behavior cloning with per-pair L2 loss at a fixed learning rate."""
    ucfg = cfg.universal
    profile = cfg.dims
    model = UniversalPolicy(
        profile,
        setting,
        ucfg.blocks,
        int(np.random.SeedSequence((seed, 7302)).generate_state(1)[0]),
        ucfg.input_mask,
        ucfg.vision_estimation,
    )
    assets_by_id = {a.asset_id: a for a in assets}
    obs, acts, rows = _precompute_pairs(index, setting, profile, encoders, assets_by_id, hand)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7303)))

    total = index.total_records
    batches_per_epoch = max(1, int(np.ceil(total / ucfg.batch_trajectories)))
    epoch_losses: list[float] = []
    for epoch in range(ucfg.epochs):
        batch_losses = []
        for _ in range(batches_per_epoch):
            picks = rows[rng.integers(0, total, size=min(ucfg.batch_trajectories, total))]
            x = obs[picks].reshape(-1, obs.shape[-1])
            a = acts[picks].reshape(-1, acts.shape[-1])
            pred = model.forward(x)
            loss = l2_row_mean(pred, a)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite distillation loss at epoch {epoch}")
            model.store.zero_grad()
            loss.backward()
            adam_step(model.store, lr=ucfg.lr)
            batch_losses.append(float(loss.data))
        epoch_losses.append(float(np.mean(batch_losses)))
        if ucfg.early_stop_loss > 0 and epoch_losses[-1] < ucfg.early_stop_loss:
            break
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_l2"])
            writer.writerows([[i + 1, loss] for i, loss in enumerate(epoch_losses)])
    return model, epoch_losses
