"""Evaluation protocols, grasp-diversity curves, and SVG plots.

Success rates are exact rational counts (successes / rollouts). Rollouts
use deterministic mean actions on held-out evaluation poses; specialists
are only ever evaluated on their own asset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .assets import ObjectAsset, TabletopPose
from .config import ExperimentConfig
from .hand import DEFAULT_HAND, HandModel
from .ppo import SpecialistPolicy, evaluate_specialist
from .sim import GraspEnv
from .universal import UniversalPolicy
from .vision import render_partial_batch


@dataclass
class SplitResult:
    successes: int = 0
    rollouts: int = 0
    per_asset: dict[int, tuple[int, int]] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.successes / self.rollouts if self.rollouts else 0.0

    def add(self, asset_id: int, wins: int, n: int) -> None:
        self.per_asset[asset_id] = (wins, n)
        self.successes += wins
        self.rollouts += n


@dataclass
class EvalReport:
    setting: str
    model_checksum: str
    splits: dict[str, SplitResult] = field(default_factory=dict)

    def to_rows(self) -> list[list]:
        rows = []
        for split, result in self.splits.items():
            for asset_id, (wins, n) in sorted(result.per_asset.items()):
                rows.append([split, asset_id, wins, n, wins / n, self.model_checksum])
        return rows


def _universal_rollout(
    model: UniversalPolicy,
    encoder,
    asset: ObjectAsset,
    poses: list[TabletopPose],
    cfg: ExperimentConfig,
    n_rollouts: int,
    hand: HandModel | None = None,
    success_rule: str = "final",
) -> tuple[int, int]:
    hand = hand or DEFAULT_HAND
    env = GraspEnv(asset, cfg.env, hand, cfg.dims, n_envs=n_rollouts)
    env.reset_all([poses[i % len(poses)] for i in range(n_rollouts)])
    ever = np.zeros(n_rollouts, dtype=bool)
    for _ in range(cfg.env.horizon):
        if model.setting == "vision":
            partials, _ = render_partial_batch(
                env.world_cloud(),
                env.hand_points(),
                cfg.dims.partial_points,
                occlusion_radius=cfg.env.occlusion_radius,
                hpr_factor=cfg.env.hpr_radius_factor,
            )
            groups = env.observe_groups("vision", encoder, partials)
        else:
            groups = env.observe_groups("state", encoder)
        env.step(model.act(groups))
        if success_rule == "anytime":
            ever |= env.success(cfg.reward.lambda_g)
    final = env.success(cfg.reward.lambda_g)
    wins = ever | final if success_rule == "anytime" else final
    return int(wins.sum()), n_rollouts


def evaluate(
    model,
    assets_with_poses: list[tuple[ObjectAsset, list[TabletopPose]]],
    cfg: ExperimentConfig,
    rollouts_per_asset: int | None = None,
    encoder=None,
    hand: HandModel | None = None,
    split_name: str = "seen",
    success_rule: str | None = None,
) -> EvalReport:
    """Success rates for a specialist or universal model over one split."""
    n = rollouts_per_asset or cfg.eval.rollouts_per_asset
    rule = success_rule or cfg.eval.success_rule
    result = SplitResult()
    if isinstance(model, SpecialistPolicy):
        checksum = f"{model.checksum():016x}"
        for asset, poses in assets_with_poses:
            wins, total = evaluate_specialist(
                model, asset, poses, cfg, n, hand, success_rule=rule
            )
            result.add(asset.asset_id, wins, total)
        setting = "state"
    elif isinstance(model, UniversalPolicy):
        checksum = f"{model.checksum():016x}"
        for asset, poses in assets_with_poses:
            wins, total = _universal_rollout(
                model, encoder, asset, poses, cfg, n, hand, rule
            )
            result.add(asset.asset_id, wins, total)
        setting = model.setting
    else:
        raise TypeError(f"cannot evaluate model of type {type(model).__name__}")
    report = EvalReport(setting=setting, model_checksum=checksum)
    report.splits[split_name] = result
    return report


# ---------------------------------------------------------------------------
# diversity


@dataclass
class DiversitySet:
    curves: list[np.ndarray]
    flagged: bool

    def band(self) -> tuple[np.ndarray, np.ndarray]:
        stack = np.stack(self.curves)
        return stack.min(axis=0), stack.max(axis=0)

    @property
    def band_area(self) -> float:
        lo, hi = self.band()
        return float((hi - lo).sum() / len(self.curves[0]))


def pooled_band_area(sets: list[DiversitySet]) -> float:
    curves = [c for s in sets for c in s.curves]
    return DiversitySet(curves, False).band_area


def _act_fn(model, encoder, cfg):
    if isinstance(model, SpecialistPolicy):
        def act(env: GraspEnv) -> np.ndarray:
            groups = env.observe_groups("specialist")
            return model.act_mean(np.concatenate(list(groups.values()), axis=1))
        return act
    def act(env: GraspEnv) -> np.ndarray:
        if model.setting == "vision":
            partials, _ = render_partial_batch(
                env.world_cloud(), env.hand_points(), cfg.dims.partial_points,
                occlusion_radius=cfg.env.occlusion_radius,
                hpr_factor=cfg.env.hpr_radius_factor,
            )
            groups = env.observe_groups("vision", encoder, partials)
        else:
            groups = env.observe_groups("state", encoder)
        return model.act(groups)
    return act


def diversity_curves(
    model,
    assets_with_poses: list[tuple[ObjectAsset, list[TabletopPose]]],
    cfg: ExperimentConfig,
    n: int | None = None,
    encoder=None,
    hand: HandModel | None = None,
) -> dict[int, DiversitySet]:
    """Per-asset mean-normalized-joint-angle series of n successful rollouts.

    Tries evaluation poses in order up to retry_budget * n attempts per
    asset; if fewer than n successes are found the set is flagged partial.
    """
    hand = hand or DEFAULT_HAND
    n = n or cfg.eval.diversity_rollouts
    act = _act_fn(model, encoder, cfg)
    specialist = isinstance(model, SpecialistPolicy)
    lo, hi = hand.joint_low, hand.joint_high
    out: dict[int, DiversitySet] = {}
    for asset, poses in assets_with_poses:
        if specialist and model.asset_id != asset.asset_id:
            raise ValueError(
                f"specialist for asset {model.asset_id} asked to run on {asset.asset_id}"
            )
        curves: list[np.ndarray] = []
        budget = cfg.eval.retry_budget * n
        attempt = 0
        while len(curves) < n and attempt < budget:
            batch = min(n - len(curves), budget - attempt, max(n, 8))
            env = GraspEnv(asset, cfg.env, hand, cfg.dims, n_envs=batch)
            env.reset_all([poses[(attempt + i) % len(poses)] for i in range(batch)])
            series = np.zeros((cfg.env.horizon, batch))
            for t in range(cfg.env.horizon):
                env.step(act(env))
                series[t] = ((env.q - lo) / (hi - lo)).mean(axis=1)
            wins = env.success(cfg.reward.lambda_g)
            for i in np.where(wins)[0]:
                if len(curves) < n:
                    curves.append(series[:, i].copy())
            attempt += batch
        if not curves:
            curves = [np.zeros(cfg.env.horizon)]
            out[asset.asset_id] = DiversitySet(curves, True)
        else:
            out[asset.asset_id] = DiversitySet(curves, len(curves) < n)
    return out


# ---------------------------------------------------------------------------
# svg emission (hand-rolled so bytes are deterministic)

_W, _H, _PAD = 640, 360, 40


def _px(t: int, horizon: int) -> float:
    return _PAD + t * (_W - 2 * _PAD) / max(horizon - 1, 1)


def _py(v: float) -> float:
    return _H - _PAD - v * (_H - 2 * _PAD)


def _polyline(values: np.ndarray, color: str, width: float) -> str:
    pts = " ".join(
        f"{_px(t, len(values)):.2f},{_py(float(v)):.2f}" for t, v in enumerate(values)
    )
    return (
        f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}" />'
    )


def diversity_svg(sets: dict[int, DiversitySet]) -> str:
    """Band plot of normalized joint angles; byte-deterministic output."""
    curves = [c for s in sets.values() for c in s.curves]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white" />',
    ]
    if curves:
        pooled = DiversitySet(curves, False)
        lo, hi = pooled.band()
        horizon = len(lo)
        upper = " ".join(f"{_px(t, horizon):.2f},{_py(float(v)):.2f}" for t, v in enumerate(hi))
        lower = " ".join(
            f"{_px(t, horizon):.2f},{_py(float(v)):.2f}"
            for t, v in zip(range(horizon - 1, -1, -1), lo[::-1])
        )
        lines.append(f'<polygon fill="#c8d8f0" stroke="none" points="{upper} {lower}" />')
        for curve in curves:
            lines.append(_polyline(curve, "#4060a0", 0.8))
        lines.append(
            f'<text x="{_PAD}" y="{_PAD - 10}" font-family="monospace" font-size="12">'
            f"band area {pooled.band_area:.4f} over {len(curves)} rollouts</text>"
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
