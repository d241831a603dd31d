"""Shared fixtures: a tiny asset set and a scripted grasp controller.

The scripted controller descends, closes, and lifts to the goal height via
simple feedback on the observation vector. It succeeds on the compact
catalog shapes, which gives the trajectory/encoder/distillation tests a
real success-filtered data source without any RL training.
"""

import numpy as np
import pytest

from deskgrasp.config import ExperimentConfig
from deskgrasp.pipeline import make_assets, make_splits


class ScriptedPolicy:
    """Deterministic descend-close-lift controller over raw observations."""

    action_dim = 9

    def __init__(self, horizon: int = 200):
        self.horizon = horizon

    def act_mean(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        t = obs[:, 66] * self.horizon       # time group, normalized scalar
        obj_x = obs[:, 42]
        obj_z = obs[:, 44]
        a = np.zeros((obs.shape[0], 9))
        descend = t < 9
        close = (t >= 9) & (t < 26)
        carry = t >= 26
        a[descend, 1] = -1.0
        a[close, 1] = -0.2
        a[close, 3:] = 1.0
        a[carry, 1] = np.clip((0.3 - obj_z[carry]) * 50.0, -1.0, 1.0)
        a[carry, 0] = np.clip(-obj_x[carry] * 50.0, -1.0, 1.0)
        a[carry, 3:] = 0.5
        return a

    def checksum(self) -> int:
        return 0xFEEDBEEF


@pytest.fixture(scope="session")
def smoke_cfg():
    cfg = ExperimentConfig()
    cfg.assets.categories = 4
    cfg.assets.per_category = 1
    cfg.assets.unseen_categories = 2
    cfg.assets.train_poses = 30
    cfg.assets.generation_poses = 12
    cfg.assets.evaluation_poses = 10
    return cfg


@pytest.fixture(scope="session")
def smoke_assets(smoke_cfg):
    sets = make_assets(smoke_cfg)
    splits = {
        a.asset_id: make_splits(smoke_cfg, a)
        for assets in sets.values()
        for a in assets
    }
    return sets, splits


@pytest.fixture(scope="session")
def scripted_policy():
    return ScriptedPolicy()


@pytest.fixture(scope="session")
def tiny_dataset(smoke_cfg, smoke_assets, scripted_policy, tmp_path_factory):
    """Scripted-policy trajectories for two assets, written as .ugtr files."""
    from deskgrasp.trajectory import DatasetIndex, generate_trajectories

    sets, splits = smoke_assets
    root = tmp_path_factory.mktemp("traj")
    for asset in sets["seen"][:2]:
        generate_trajectories(
            scripted_policy,
            asset,
            splits[asset.asset_id].generation,
            4,
            smoke_cfg,
            seed=1000 + asset.asset_id,
            out_dir=root,
            retry_budget=4,
            batch_envs=4,
        )
    return DatasetIndex.load(root)
