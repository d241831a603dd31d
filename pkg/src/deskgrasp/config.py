"""Experiment configuration: defaults, dimension profiles, TOML loading.

All tunables for the pipeline live here, grouped the same way the TOML
config files are ([env], [reward], [ppo], [encoder], [universal], [eval]).
Two dimension profiles exist: "desk", the trainable small-scale setup, and
"paper-dims", which reproduces the published tensor shapes for structural
checks only (it is not simulatable).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Raised for malformed config files or inconsistent field values."""


GROUP_NAMES = (
    "proprioception",
    "prev_action",
    "object_state",
    "object_feature",
    "hand_object_dist",
    "time",
)


@dataclass(frozen=True)
class DimensionProfile:
    """Named set of tensor dimensions shared by env, networks and stores."""

    name: str
    group_dims: tuple[int, int, int, int, int, int]
    vision_object_state: int
    action_dim: int
    policy_widths: tuple[int, ...]
    token_dim: int
    head_widths: tuple[int, ...]
    cloud_points: int
    partial_points: int
    hand_points: int

    @property
    def latent_dim(self) -> int:
        return self.group_dims[3]

    @property
    def head_input(self) -> int:
        return 6 * self.token_dim

    def group_dims_for(self, setting: str) -> tuple[int, ...]:
        """Group lengths for a setting: 'state', 'vision' or 'specialist'."""
        d = list(self.group_dims)
        if setting == "vision":
            d[2] = self.vision_object_state
            return tuple(d)
        if setting == "specialist":
            return tuple(d[:3] + d[4:])
        if setting == "state":
            return tuple(d)
        raise ConfigError(f"unknown setting {setting!r}")


DESK_PROFILE = DimensionProfile(
    name="desk",
    group_dims=(33, 9, 16, 32, 8, 29),
    vision_object_state=12,
    action_dim=9,
    policy_widths=(256, 256, 128, 128),
    token_dim=64,
    head_widths=(256, 128, 64),
    cloud_points=512,
    partial_points=128,
    hand_points=8,
)

PAPER_DIMS_PROFILE = DimensionProfile(
    name="paper-dims",
    group_dims=(167, 24, 16, 128, 36, 29),
    vision_object_state=12,
    action_dim=24,
    policy_widths=(1024, 1024, 512, 512),
    token_dim=256,
    head_widths=(1024, 512, 256),
    cloud_points=1024,
    partial_points=1024,
    hand_points=36,
)

PROFILES = {"desk": DESK_PROFILE, "paper-dims": PAPER_DIMS_PROFILE}


@dataclass
class EnvConfig:
    """Tabletop environment geometry and quasi-static stepping constants."""

    horizon: int = 200
    goal: tuple[float, float, float] = (0.0, 0.0, 0.3)
    hand_start_height: float = 0.2
    pose_disk_radius: float = 0.05
    g_step: float = 0.01
    extent_min: float = 0.03
    extent_max: float = 0.12
    strict_actions: bool = False
    # attachment heuristic
    attach_distance: float = 0.06          # = lambda_c
    release_factor: float = 2.0
    opposition_min_angle_deg: float = 90.0
    # camera rig / partial-cloud synthesis
    occlusion_radius: float = 0.015
    hpr_radius_factor: float = 100.0
    # wrist action scaling (x, z, pitch) and joint delta, per step
    wrist_deltas: tuple[float, float, float] = (0.015, 0.015, 0.05)
    joint_delta: float = 0.05


@dataclass
class RewardConfig:
    """Weights and thresholds of the contact-gated grasp reward."""

    omega_d: float = 1.0
    omega_o: float = 0.1
    omega_l: float = 0.1
    omega_g: float = 2.0
    omega_s: float = 1.0
    lambda_c: float = 0.06
    lambda_g: float = 0.05
    rd_target: str = "cloud"   # or "center"
    use_ro: bool = True
    # lift term input: "action" reads the commanded wrist-z channel,
    # "velocity" the measured wrist-z delta
    lift_source: str = "action"

    def __post_init__(self) -> None:
        for name in ("omega_d", "omega_o", "omega_l", "omega_g", "omega_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lambda_c <= 0 or self.lambda_g <= 0:
            raise ConfigError("thresholds must be > 0")
        if self.rd_target not in ("cloud", "center"):
            raise ConfigError(f"rd_target must be cloud|center, got {self.rd_target!r}")


@dataclass
class PPOHyper:
    """Clipped-surrogate PPO hyperparameters for specialist training."""

    lr: float = 3e-4
    rollout_horizon: int = 16
    updates: int = 2000
    paper_updates: int = 10000
    envs_per_object: int = 64
    paper_envs_per_object: int = 1000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    epochs_per_update: int = 4
    minibatches: int = 4
    log_std_init: float = -1.0
    eval_every: int = 200
    eval_rollouts: int = 50
    early_stop_success: float = 2.0   # > 1 disables
    normalize_obs: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if self.clip <= 0:
            raise ConfigError("clip must be > 0")


@dataclass
class EncoderConfig:
    """Point-cloud autoencoder widths and training schedule."""

    point_mlp: tuple[int, ...] = (64, 128)
    decoder_hidden: int = 256
    lr: float = 5e-4
    batch_clouds: int = 16
    paper_batch_clouds: int = 100
    iterations: int = 20000
    paper_iterations: int = 800000
    omega_cd: float = 1.0
    omega_distill: float = 0.1
    batch_steps: int = 32


@dataclass
class UniversalConfig:
    """Tokenizer/attention/head distillation network and its trainer."""

    blocks: int = 12
    lr: float = 1e-4
    batch_trajectories: int = 16
    paper_batch_trajectories: int = 800
    epochs: int = 20
    paper_epochs: int = 100
    input_mask: tuple[str, ...] = GROUP_NAMES
    vision_estimation: str = "center_pca"   # none | center | center_pca
    early_stop_loss: float = 0.0            # <= 0 disables

    def __post_init__(self) -> None:
        unknown = set(self.input_mask) - set(GROUP_NAMES)
        if unknown:
            raise ConfigError(f"unknown input groups {sorted(unknown)}")
        if self.vision_estimation not in ("none", "center", "center_pca"):
            raise ConfigError(f"bad vision_estimation {self.vision_estimation!r}")


@dataclass
class EvalConfig:
    """Evaluation protocol sizes."""

    rollouts_per_asset: int = 50
    paper_rollouts_per_asset: int = 1000
    trajectories_per_object: int = 200       # M
    paper_trajectories_per_object: int = 1000
    retry_budget: int = 10
    diversity_rollouts: int = 10
    success_rule: str = "final"              # final | anytime

    def __post_init__(self) -> None:
        if self.success_rule not in ("final", "anytime"):
            raise ConfigError(f"bad success_rule {self.success_rule!r}")


@dataclass
class AssetConfig:
    """Procedural object-set and pose-dataset sizes."""

    categories: int = 8
    per_category: int = 4
    unseen_categories: int = 2
    train_poses: int = 500
    generation_poses: int = 50
    evaluation_poses: int = 50
    paper_train_poses: int = 10000
    paper_generation_poses: int = 1000
    paper_evaluation_poses: int = 1000


@dataclass
class ExperimentConfig:
    """Bundle of every section plus the active dimension profile."""

    profile: str = "desk"
    seed: int = 0
    assets: AssetConfig = field(default_factory=AssetConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PPOHyper = field(default_factory=PPOHyper)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    universal: UniversalConfig = field(default_factory=UniversalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def dims(self) -> DimensionProfile:
        try:
            return PROFILES[self.profile]
        except KeyError:
            raise ConfigError(f"unknown profile {self.profile!r}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def checksum(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "assets": AssetConfig,
    "env": EnvConfig,
    "reward": RewardConfig,
    "ppo": PPOHyper,
    "encoder": EncoderConfig,
    "universal": UniversalConfig,
    "eval": EvalConfig,
}


def _build_section(cls, data: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown keys in [{cls.__name__}]: {sorted(unknown)}")
    coerced = {}
    for key, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    kwargs = {}
    for name in ("profile", "seed"):
        if name in data:
            kwargs[name] = data.pop(name)
    for section, cls in _SECTIONS.items():
        if section in data:
            raw = data.pop(section)
            if not isinstance(raw, dict):
                raise ConfigError(f"[{section}] must be a table")
            kwargs[section] = _build_section(cls, raw)
    if data:
        raise ConfigError(f"unknown top-level keys: {sorted(data)}")
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    """Load a TOML config file, falling back to defaults per section."""
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Return a new config with dotted-key overrides applied.

    Keys look like "ppo.updates" or "reward.use_ro"; top-level keys
    ("profile", "seed") are plain.
    """
    data = cfg.to_dict()
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node:
                raise ConfigError(f"unknown override section {part!r} in {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown override key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
