"""End-to-end pipeline stages with content-keyed caching.

Every stage derives a key from the config fields that influence its
output; artifacts land in workdir/<stage>_<key>/ and are reused when the
key matches. Trajectory caches are M-nested: a dataset generated for a
larger M serves any smaller M by truncating to the first M records, which
is exact because generation batch sizes never depend on M.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .assets import ObjectAsset, PoseSplits, build_pose_splits, generate_object_set
from .config import ExperimentConfig
from .encoders import PointCloudEncoder, train_s_encoder, train_v_encoder
from .nn import read_checkpoint, write_checkpoint
from .ppo import SpecialistPolicy, train_specialist
from .trajectory import DatasetIndex, IndexEntry, generate_trajectories
from .universal import UniversalPolicy, train_universal


def _key(parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _section(cfg_section) -> dict:
    return dataclasses.asdict(cfg_section)


def make_assets(cfg: ExperimentConfig) -> dict[str, list[ObjectAsset]]:
    return generate_object_set(
        cfg.assets.categories,
        cfg.assets.per_category,
        cfg.assets.unseen_categories,
        cfg.seed,
        n_points=cfg.dims.cloud_points,
        extent_min=cfg.env.extent_min,
        extent_max=cfg.env.extent_max,
    )


def make_splits(cfg: ExperimentConfig, asset: ObjectAsset) -> PoseSplits:
    counts = (
        cfg.assets.train_poses,
        cfg.assets.generation_poses,
        cfg.assets.evaluation_poses,
    )
    return build_pose_splits(asset, counts, cfg.seed, cfg.env.pose_disk_radius)


def find_asset(sets: dict[str, list[ObjectAsset]], asset_id: int) -> ObjectAsset:
    for assets in sets.values():
        for asset in assets:
            if asset.asset_id == asset_id:
                return asset
    raise KeyError(f"no asset with id {asset_id}")


class Pipeline:
    """Stage runner bound to one config and a cache directory."""

    def __init__(self, cfg: ExperimentConfig, workdir: str | Path):
        self.cfg = cfg
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self._assets: dict[str, list[ObjectAsset]] | None = None
        self._splits: dict[int, PoseSplits] = {}

    # -- assets --------------------------------------------------------------

    def assets(self) -> dict[str, list[ObjectAsset]]:
        if self._assets is None:
            self._assets = make_assets(self.cfg)
        return self._assets

    def splits(self, asset: ObjectAsset) -> PoseSplits:
        if asset.asset_id not in self._splits:
            self._splits[asset.asset_id] = make_splits(self.cfg, asset)
        return self._splits[asset.asset_id]

    def seen_assets(self) -> list[ObjectAsset]:
        return self.assets()["seen"]

    # -- specialists -----------------------------------------------------------

    def _specialist_key(self, asset: ObjectAsset) -> str:
        return _key(
            {
                "stage": "specialist",
                "profile": self.cfg.profile,
                "seed": self.cfg.seed,
                "asset": (asset.asset_id, asset.seed),
                "assets": _section(self.cfg.assets),
                "env": _section(self.cfg.env),
                "reward": _section(self.cfg.reward),
                "ppo": _section(self.cfg.ppo),
            }
        )

    def specialist(self, asset: ObjectAsset) -> tuple[SpecialistPolicy, list]:
        key = self._specialist_key(asset)
        stage = self.workdir / f"specialist_{asset.asset_id}_{key}"
        ckpt = stage / "policy.ugnn"
        meta = stage / "done.json"
        if meta.exists():
            arrays = read_checkpoint(ckpt)
            policy = SpecialistPolicy.from_arrays(arrays)
            curve = json.loads(meta.read_text())["curve"]
            return policy, [tuple(entry) for entry in curve]
        stage.mkdir(parents=True, exist_ok=True)
        policy, curve = train_specialist(
            asset, self.splits(asset), self.cfg, self.cfg.seed,
            metrics_path=stage / "metrics.csv",
        )
        write_checkpoint(ckpt, policy.to_arrays())
        meta.write_text(json.dumps({"curve": curve, "key": key}))
        policy = SpecialistPolicy.from_arrays(read_checkpoint(ckpt))
        return policy, curve

    # -- trajectories ------------------------------------------------------------

    def _trajectory_key(self, asset: ObjectAsset) -> str:
        return _key(
            {
                "stage": "trajectories",
                "specialist": self._specialist_key(asset),
                "retry_budget": self.cfg.eval.retry_budget,
                "partial_points": self.cfg.dims.partial_points,
            }
        )

    def trajectories(self, m: int | None = None) -> DatasetIndex:
        """Dataset over all seen assets with at least M records each."""
        m = m or self.cfg.eval.trajectories_per_object
        entries: dict[int, IndexEntry] = {}
        root: Path | None = None
        for asset in self.seen_assets():
            key = self._trajectory_key(asset)
            stage = self.workdir / f"traj_{asset.asset_id}_{key}"
            meta = stage / "done.json"
            have = json.loads(meta.read_text())["count"] if meta.exists() else 0
            if have < m:
                policy, _ = self.specialist(asset)
                generate_trajectories(
                    policy, asset, self.splits(asset).generation, m,
                    self.cfg, self.cfg.seed, stage,
                )
                meta.write_text(json.dumps({"count": m, "key": key}))
            index = DatasetIndex.load(stage)
            entry = index.entries[asset.asset_id]
            entries[asset.asset_id] = IndexEntry(
                str(Path(stage.name) / entry.file), m, entry.offsets[:m], entry.checksum
            )
            root = self.workdir
        assert root is not None, "no seen assets"
        return DatasetIndex(root, entries, self.cfg.seed)

    # -- encoders -----------------------------------------------------------------

    def s_encoder(self, iterations: int | None = None) -> PointCloudEncoder:
        key = _key(
            {
                "stage": "s_encoder",
                "profile": self.cfg.profile,
                "seed": self.cfg.seed,
                "assets": _section(self.cfg.assets),
                "encoder": _section(self.cfg.encoder),
                "iterations": iterations,
            }
        )
        stage = self.workdir / f"senc_{key}"
        ckpt = stage / "encoder_s.ugnn"
        if (stage / "done.json").exists():
            return PointCloudEncoder.from_arrays(read_checkpoint(ckpt))
        stage.mkdir(parents=True, exist_ok=True)
        encoder, losses = train_s_encoder(
            self.seen_assets(), self.cfg, self.cfg.seed, iterations,
            metrics_path=stage / "losses.csv",
        )
        write_checkpoint(ckpt, encoder.to_arrays())
        (stage / "done.json").write_text(json.dumps({"final_loss": losses[-1]}))
        return PointCloudEncoder.from_arrays(read_checkpoint(ckpt))

    def v_encoder(
        self,
        index: DatasetIndex,
        s_encoder: PointCloudEncoder,
        iterations: int | None = None,
        omega_distill: float | None = None,
    ) -> PointCloudEncoder:
        key = _key(
            {
                "stage": "v_encoder",
                "profile": self.cfg.profile,
                "seed": self.cfg.seed,
                "encoder": _section(self.cfg.encoder),
                "s_encoder": s_encoder.checksum(),
                "dataset": sorted((a, e.count) for a, e in index.entries.items()),
                "iterations": iterations,
                "omega_distill": omega_distill,
            }
        )
        stage = self.workdir / f"venc_{key}"
        ckpt = stage / "encoder_v.ugnn"
        if (stage / "done.json").exists():
            return PointCloudEncoder.from_arrays(read_checkpoint(ckpt))
        stage.mkdir(parents=True, exist_ok=True)
        encoder, losses = train_v_encoder(
            index, s_encoder, self.seen_assets(), self.cfg, self.cfg.seed,
            iterations, omega_distill, metrics_path=stage / "losses.csv",
        )
        write_checkpoint(ckpt, encoder.to_arrays())
        (stage / "done.json").write_text(json.dumps({"final_loss": losses[-1]}))
        return PointCloudEncoder.from_arrays(read_checkpoint(ckpt))

    # -- universal -------------------------------------------------------------------

    def universal(
        self,
        index: DatasetIndex,
        setting: str,
        encoders: dict[str, PointCloudEncoder],
    ) -> tuple[UniversalPolicy, list[float]]:
        key = _key(
            {
                "stage": "universal",
                "profile": self.cfg.profile,
                "seed": self.cfg.seed,
                "setting": setting,
                "universal": _section(self.cfg.universal),
                "encoders": sorted((r, e.checksum()) for r, e in encoders.items()),
                "dataset": sorted((a, e.count) for a, e in index.entries.items()),
            }
        )
        stage = self.workdir / f"universal_{key}"
        ckpt = stage / "universal.ugnn"
        meta = stage / "done.json"
        if meta.exists():
            model = UniversalPolicy.from_arrays(read_checkpoint(ckpt))
            return model, json.loads(meta.read_text())["losses"]
        stage.mkdir(parents=True, exist_ok=True)
        model, losses = train_universal(
            index, setting, self.cfg, encoders, self.seen_assets(), self.cfg.seed,
            metrics_path=stage / "distill_metrics.csv",
        )
        write_checkpoint(ckpt, model.to_arrays())
        meta.write_text(json.dumps({"losses": losses, "key": key}))
        model = UniversalPolicy.from_arrays(read_checkpoint(ckpt))
        return model, losses
