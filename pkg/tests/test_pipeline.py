import json

import numpy as np
import pytest

from deskgrasp.ablation import load_matrix, run_ablation
from deskgrasp.config import ExperimentConfig, apply_overrides
from deskgrasp.pipeline import Pipeline


def _tiny_cfg():
    cfg = ExperimentConfig()
    return apply_overrides(
        cfg,
        {
            "assets.categories": 2,
            "assets.per_category": 1,
            "assets.unseen_categories": 0,
            "assets.train_poses": 8,
            "assets.generation_poses": 4,
            "assets.evaluation_poses": 4,
            "ppo.updates": 3,
            "ppo.envs_per_object": 8,
            "ppo.eval_every": 2,
            "ppo.eval_rollouts": 4,
            "eval.rollouts_per_asset": 4,
            "eval.trajectories_per_object": 2,
            "eval.retry_budget": 40,
            "encoder.iterations": 5,
            "encoder.batch_clouds": 2,
            "encoder.batch_steps": 4,
            "universal.blocks": 1,
            "universal.epochs": 2,
            "universal.batch_trajectories": 2,
        },
    )


def test_specialist_stage_cached(tmp_path):
    cfg = _tiny_cfg()
    pipe = Pipeline(cfg, tmp_path)
    asset = pipe.seen_assets()[0]
    p1, c1 = pipe.specialist(asset)
    stamp = {f: f.stat().st_mtime_ns for f in tmp_path.rglob("policy.ugnn")}
    pipe2 = Pipeline(cfg, tmp_path)
    p2, c2 = pipe2.specialist(asset)
    assert c1 == c2
    assert p1.checksum() == p2.checksum()
    for f, t in stamp.items():
        assert f.stat().st_mtime_ns == t  # untouched: loaded from cache

    # changing a config knob that matters invalidates the key
    cfg3 = apply_overrides(cfg, {"ppo.updates": 4})
    pipe3 = Pipeline(cfg3, tmp_path)
    key1 = pipe._specialist_key(asset)
    key3 = pipe3._specialist_key(asset)
    assert key1 != key3


def test_trajectory_m_nesting(tmp_path):
    """A dataset generated for larger M serves smaller M by truncation.

    The tiny 3-update policies rarely succeed, so drive the stage with the
    scripted controller by monkeypatching the specialist lookup.
    """
    cfg = apply_overrides(_tiny_cfg(), {"assets.categories": 1})
    pipe = Pipeline(cfg, tmp_path)

    from conftest import ScriptedPolicy

    pipe.specialist = lambda asset: (ScriptedPolicy(), [])  # type: ignore[assignment]
    idx1 = pipe.trajectories(m=1)
    first = [idx1.load_record(aid, 0).pose_seed for aid in idx1.asset_ids()]
    idx2 = pipe.trajectories(m=2)
    assert all(e.count == 2 for e in idx2.entries.values())
    again = [idx2.load_record(aid, 0).pose_seed for aid in idx2.asset_ids()]
    assert first == again  # prefix property held through the cache


def test_run_ablation_rows_and_failure_isolation(tmp_path):
    matrix = tmp_path / "matrix.toml"
    matrix.write_text(
        """
[base.assets]
categories = 1
per_category = 1
unseen_categories = 0
train_poses = 6
generation_poses = 3
evaluation_poses = 3

[base.ppo]
updates = 2
envs_per_object = 4
eval_every = 2
eval_rollouts = 2

[base.eval]
rollouts_per_asset = 2
trajectories_per_object = 1
retry_budget = 1

[base.encoder]
iterations = 3
batch_clouds = 1
batch_steps = 2

[base.universal]
blocks = 0
epochs = 1
batch_trajectories = 1

[[variants]]
name = "specialists"
axis = "reward"
evaluate = "specialists"

[[variants]]
name = "boom"
axis = "reward"
evaluate = "specialists"
[variants.overrides]
"reward.lambda_c" = -1.0
"""
    )
    rows = run_ablation(matrix, tmp_path / "out.csv", tmp_path / "work")
    assert len(rows) == 2
    assert rows[0]["status"] == "ok"
    assert rows[0]["rollouts"] == 2
    assert rows[0]["config_checksum"]
    assert rows[1]["status"].startswith("error")
    csv_text = (tmp_path / "out.csv").read_text()
    assert csv_text.splitlines()[0].startswith("variant,axis,value")


def test_load_matrix_validation(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("x = 1\n")
    with pytest.raises(Exception):
        load_matrix(bad)
