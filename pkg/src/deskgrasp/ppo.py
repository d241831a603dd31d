"""Per-object specialist training: GAE, clipped PPO, parallel rollouts.

The policy is Gaussian with a tanh-squashed mean network and a learned
state-independent log-std. Observations are normalized by running
mean/variance statistics collected during training (frozen for
evaluation); trajectories persist raw observations, so distillation
targets never depend on the normalizer.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .assets import ObjectAsset, PoseSplits, TabletopPose
from .config import DESK_PROFILE, DimensionProfile, ExperimentConfig, PPOHyper
from .hand import DEFAULT_HAND, HandModel
from .nn import ParameterStore, Tensor, adam_step, init_mlp, mlp_forward, mlp_forward_np
from .nn import tensor as T
from .reward import reward_terms
from .sim import GraspEnv

LOG_2PI = float(np.log(2.0 * np.pi))


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite."""


class RunningNorm:
    """Running mean/variance via the parallel (Chan) update."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=float).reshape(-1, self.mean.shape[0])
        n = batch.shape[0]
        if n == 0:
            return
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        delta = b_mean - self.mean
        tot = self.count + n
        self.mean = self.mean + delta * n / tot
        m2 = self.var * self.count + b_var * n + delta * delta * self.count * n / tot
        self.var = m2 / tot
        self.count = tot

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / np.sqrt(self.var + 1e-8)).astype(np.float32)

    def copy(self) -> "RunningNorm":
        out = RunningNorm(self.mean.shape[0])
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        out.count = self.count
        return out


@dataclass
class SpecialistPolicy:
    """Policy + value networks, log-std, and frozen observation statistics."""

    store: ParameterStore
    obs_rms: RunningNorm
    asset_id: int
    obs_dim: int
    action_dim: int
    normalize_obs: bool = True

    def act_mean(self, obs_raw: np.ndarray) -> np.ndarray:
        x = self.obs_rms.normalize(obs_raw) if self.normalize_obs else obs_raw.astype(np.float32)
        arrays = self.store.arrays()
        return np.tanh(mlp_forward_np(arrays, "policy", x))

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.store.arrays())
        arrays["obs_norm.mean"] = self.obs_rms.mean
        arrays["obs_norm.var"] = self.obs_rms.var
        arrays["obs_norm.count"] = np.asarray([self.obs_rms.count])
        arrays["meta.asset_id"] = np.asarray([float(self.asset_id)])
        arrays["meta.obs_dim"] = np.asarray([float(self.obs_dim)])
        arrays["meta.action_dim"] = np.asarray([float(self.action_dim)])
        arrays["meta.normalize_obs"] = np.asarray([float(self.normalize_obs)])
        arrays["meta.kind"] = np.asarray([0.0])
        return arrays

    def checksum(self) -> int:
        import hashlib

        h = hashlib.blake2b(digest_size=8)
        for name, value in self.to_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value.astype("<f4")).tobytes())
        return int.from_bytes(h.digest(), "little")

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "SpecialistPolicy":
        if int(arrays["meta.kind"][0]) != 0:
            raise ValueError("checkpoint is not a specialist policy")
        store = ParameterStore()
        for name, value in arrays.items():
            if name.startswith(("policy.", "value.")) or name == "log_std":
                store.add(name, value)
        obs_dim = int(arrays["meta.obs_dim"][0])
        rms = RunningNorm(obs_dim)
        rms.mean = arrays["obs_norm.mean"].astype(float)
        rms.var = arrays["obs_norm.var"].astype(float)
        rms.count = float(arrays["obs_norm.count"][0])
        return SpecialistPolicy(
            store=store,
            obs_rms=rms,
            asset_id=int(arrays["meta.asset_id"][0]),
            obs_dim=obs_dim,
            action_dim=int(arrays["meta.action_dim"][0]),
            normalize_obs=bool(arrays["meta.normalize_obs"][0]),
        )


def init_specialist(
    asset_id: int,
    obs_dim: int,
    action_dim: int,
    widths: tuple[int, ...],
    seed: int,
    log_std_init: float = -1.0,
    normalize_obs: bool = True,
    dtype=np.float32,
) -> SpecialistPolicy:
    rng = np.random.default_rng(seed)
    store = ParameterStore(dtype=dtype)
    init_mlp(store, "policy", [obs_dim, *widths, action_dim], rng)
    init_mlp(store, "value", [obs_dim, *widths, 1], rng)
    store.add("log_std", np.full(action_dim, log_std_init))
    return SpecialistPolicy(store, RunningNorm(obs_dim), asset_id, obs_dim, action_dim, normalize_obs)


# ---------------------------------------------------------------------------
# advantage estimation


def gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE(lambda) advantages and returns.

    rewards/dones are (T,) or (T, E); values must carry one extra row with
    the bootstrap value of the state after the last transition.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[:, None], values[:, None], dones[:, None]
    horizon = rewards.shape[0]
    if values.shape[0] != horizon + 1 or dones.shape[0] != horizon:
        raise ValueError(
            f"length mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}"
        )
    adv = np.zeros_like(rewards)
    carry = np.zeros(rewards.shape[1])
    for t in range(horizon - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        carry = delta + gamma * lam * nonterminal * carry
        adv[t] = carry
    returns = adv + values[:horizon]
    if squeeze:
        return adv[:, 0], returns[:, 0]
    return adv, returns


# ---------------------------------------------------------------------------
# PPO objective


def _gaussian_logp_np(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    d = actions.shape[-1]
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * d * LOG_2PI


def ppo_loss(
    store: ParameterStore,
    obs: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    hyper: PPOHyper,
) -> tuple[T.Tensor, dict[str, float]]:
    """Clipped-surrogate policy loss plus weighted value MSE, as one graph."""
    d = actions.shape[-1]
    x = Tensor(obs.astype(store.dtype))
    mean = T.tanh(mlp_forward(store, "policy", x))
    log_std = store["log_std"]
    diff = T.sub(Tensor(actions.astype(store.dtype)), mean)
    z = T.mul(diff, T.exp(T.scale(log_std, -1.0)))
    logp = T.sub(T.scale(T.total(T.square(z), axis=-1), -0.5), T.total(log_std))
    logp = T.add(logp, Tensor(np.asarray(-0.5 * d * LOG_2PI, dtype=store.dtype)))

    ratio = T.exp(T.sub(logp, Tensor(old_logp.astype(store.dtype))))
    adv = Tensor(advantages.astype(store.dtype))
    surrogate = T.minimum(
        T.mul(ratio, adv),
        T.mul(T.clip(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip), adv),
    )
    policy_loss = T.scale(T.mean(surrogate), -1.0)

    value = mlp_forward(store, "value", x)
    vdiff = T.sub(value, Tensor(returns.reshape(-1, 1).astype(store.dtype)))
    value_loss = T.mean(T.square(vdiff))

    loss = T.add(policy_loss, T.scale(value_loss, hyper.value_coef))
    if hyper.entropy_coef:
        entropy = T.add(
            T.total(log_std), Tensor(np.asarray(0.5 * d * (1.0 + LOG_2PI), dtype=store.dtype))
        )
        loss = T.sub(loss, T.scale(entropy, hyper.entropy_coef))
    stats = {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "ratio_mean": float(ratio.data.mean()),
    }
    return loss, stats


def ppo_update(
    store: ParameterStore,
    buffer: dict[str, np.ndarray],
    hyper: PPOHyper,
    rng: np.random.Generator,
) -> dict[str, float]:
    """Epochs of shuffled-minibatch clipped-PPO + value updates with Adam.

    buffer holds flattened rollout arrays (obs, actions, logp, advantages,
    returns); advantages are expected to be normalized already.
    """
    n = buffer["obs"].shape[0]
    stats_acc: dict[str, float] = {"policy_loss": 0.0, "value_loss": 0.0, "ratio_mean": 0.0}
    batches = 0
    for _ in range(hyper.epochs_per_update):
        perm = rng.permutation(n)
        for chunk in np.array_split(perm, hyper.minibatches):
            if chunk.size == 0:
                continue
            loss, stats = ppo_loss(
                store,
                buffer["obs"][chunk],
                buffer["actions"][chunk],
                buffer["logp"][chunk],
                buffer["advantages"][chunk],
                buffer["returns"][chunk],
                hyper,
            )
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite PPO loss (policy {stats['policy_loss']}, value {stats['value_loss']})"
                )
            store.zero_grad()
            loss.backward()
            try:
                adam_step(store, lr=hyper.lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc)) from exc
            for key in stats_acc:
                stats_acc[key] += stats[key]
            batches += 1
    return {key: value / max(batches, 1) for key, value in stats_acc.items()}


# ---------------------------------------------------------------------------
# rollouts and the training loop


def _mean_center_dist(hand_pts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.linalg.norm(hand_pts - centers[:, None, :], axis=2).mean(axis=1)


def _batch_rewards(env: GraspEnv, executed: np.ndarray, reward_cfg, hand: HandModel) -> np.ndarray:
    if reward_cfg.rd_target == "center":
        mean_dist = _mean_center_dist(env.hand_points(), env.obj_pos)
    else:
        mean_dist = env.distances().mean(axis=1)
    q_dev = np.linalg.norm(env.q - hand.q_open_array, axis=1)
    if reward_cfg.lift_source == "action":
        a_z = executed[:, 1]
    else:
        a_z = (env.wrist[:, 1] - env.wrist_prev[:, 1]) / env.cfg.wrist_deltas[1]
    goal_dist = np.linalg.norm(env.obj_pos - env.goal[None, :], axis=1)
    return reward_terms(mean_dist, q_dev, a_z, goal_dist, reward_cfg).total


def evaluate_specialist(
    policy: SpecialistPolicy,
    asset: ObjectAsset,
    poses: list[TabletopPose],
    cfg: ExperimentConfig,
    n_rollouts: int | None = None,
    hand: HandModel | None = None,
    success_rule: str = "final",
) -> tuple[int, int]:
    """Deterministic mean-action rollouts; returns (successes, rollouts)."""
    if policy.asset_id != asset.asset_id:
        raise ValueError(
            f"specialist for asset {policy.asset_id} evaluated on asset {asset.asset_id}"
        )
    hand = hand or DEFAULT_HAND
    n = n_rollouts or cfg.eval.rollouts_per_asset
    env = GraspEnv(asset, cfg.env, hand, cfg.dims, n_envs=n)
    env.reset_all([poses[i % len(poses)] for i in range(n)])
    ever = np.zeros(n, dtype=bool)
    for _ in range(cfg.env.horizon):
        obs = _concat_groups(env.observe_groups("specialist"))
        env.step(policy.act_mean(obs))
        if success_rule == "anytime":
            ever |= env.success(cfg.reward.lambda_g)
    final = env.success(cfg.reward.lambda_g)
    wins = ever | final if success_rule == "anytime" else final
    return int(wins.sum()), n


def _concat_groups(groups: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate(list(groups.values()), axis=1)


def train_specialist(
    asset: ObjectAsset,
    splits: PoseSplits,
    cfg: ExperimentConfig,
    seed: int,
    hand: HandModel | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[SpecialistPolicy, list[tuple[int, float]]]:
    """PPO over parallel environments on the asset's training poses.

    Episodes draw random train poses; every `eval_every` updates the
    current policy is evaluated with deterministic actions on the held-out
    generation poses, and the best checkpoint by evaluation success is
    returned together with the evaluation curve.
    """
    hand = hand or DEFAULT_HAND
    hyper = cfg.ppo
    profile = cfg.dims
    n_envs = hyper.envs_per_object
    seed_seq = np.random.SeedSequence((seed, asset.asset_id, 7001))
    init_seed, sample_seed, shuffle_seed, pose_seed = seed_seq.spawn(4)
    sample_rng = np.random.default_rng(sample_seed)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    pose_rngs = [np.random.default_rng(s) for s in pose_seed.spawn(n_envs)]

    obs_dim = sum(profile.group_dims_for("specialist"))
    policy = init_specialist(
        asset.asset_id,
        obs_dim,
        profile.action_dim,
        profile.policy_widths,
        init_seed.generate_state(1)[0],
        hyper.log_std_init,
        hyper.normalize_obs,
    )
    store = policy.store
    rms = policy.obs_rms

    env = GraspEnv(asset, cfg.env, hand, profile, n_envs=n_envs)
    train_poses = splits.train
    env.reset_all([train_poses[int(r.integers(len(train_poses)))] for r in pose_rngs])
    obs_raw = _concat_groups(env.observe_groups("specialist"))

    def normalized(x: np.ndarray) -> np.ndarray:
        return rms.normalize(x) if hyper.normalize_obs else x.astype(np.float32)

    best: tuple[float, dict[str, np.ndarray], RunningNorm] | None = None
    curve: list[tuple[int, float]] = []
    rows: list[list] = []
    horizon = hyper.rollout_horizon

    for update in range(hyper.updates):
        buf_obs = np.zeros((horizon, n_envs, obs_dim), dtype=np.float32)
        buf_act = np.zeros((horizon, n_envs, profile.action_dim), dtype=np.float32)
        buf_logp = np.zeros((horizon, n_envs), dtype=np.float32)
        buf_val = np.zeros((horizon + 1, n_envs), dtype=np.float32)
        buf_rew = np.zeros((horizon, n_envs), dtype=np.float32)
        buf_done = np.zeros((horizon, n_envs), dtype=np.float32)
        raw_chunk = np.zeros((horizon, n_envs, obs_dim))

        arrays = store.arrays()
        log_std = arrays["log_std"]
        for t in range(horizon):
            nobs = normalized(obs_raw)
            mean = np.tanh(mlp_forward_np(arrays, "policy", nobs))
            noise = sample_rng.standard_normal(mean.shape)
            actions = mean + np.exp(log_std) * noise
            buf_obs[t] = nobs
            raw_chunk[t] = obs_raw
            buf_act[t] = actions
            buf_logp[t] = _gaussian_logp_np(actions, mean, log_std)
            buf_val[t] = mlp_forward_np(arrays, "value", nobs)[:, 0]
            env.step(actions)
            executed = np.clip(actions, -1.0, 1.0)
            buf_rew[t] = _batch_rewards(env, executed, cfg.reward, hand)
            done = env.at_horizon()
            buf_done[t] = done
            if done.any():
                idx = np.where(done)[0]
                env.reset_envs(
                    idx,
                    [train_poses[int(pose_rngs[i].integers(len(train_poses)))] for i in idx],
                )
            obs_raw = _concat_groups(env.observe_groups("specialist"))
        buf_val[horizon] = mlp_forward_np(arrays, "value", normalized(obs_raw))[:, 0]

        if hyper.normalize_obs:
            rms.update(raw_chunk.reshape(-1, obs_dim))

        adv, ret = gae(buf_rew, buf_val, buf_done, hyper.gamma, hyper.gae_lambda)
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        buffer = {
            "obs": buf_obs.reshape(-1, obs_dim),
            "actions": buf_act.reshape(-1, profile.action_dim),
            "logp": buf_logp.reshape(-1),
            "advantages": adv.reshape(-1).astype(np.float32),
            "returns": ret.reshape(-1).astype(np.float32),
        }
        stats = ppo_update(store, buffer, hyper, shuffle_rng)

        eval_success = ""
        last = update == hyper.updates - 1
        if (update + 1) % hyper.eval_every == 0 or last:
            wins, total_evals = evaluate_specialist(
                policy, asset, splits.generation, cfg, hyper.eval_rollouts, hand
            )
            rate = wins / total_evals
            curve.append((update + 1, rate))
            eval_success = f"{rate:.6f}"
            if best is None or rate > best[0]:
                best = (rate, store.snapshot(), rms.copy())
            if rate >= hyper.early_stop_success:
                rows.append([update + 1, float(buf_rew.mean()), eval_success,
                             stats["policy_loss"], stats["value_loss"]])
                break
        rows.append([update + 1, float(buf_rew.mean()), eval_success,
                     stats["policy_loss"], stats["value_loss"]])

    if best is not None:
        store.load_arrays(best[1])
        policy.obs_rms = best[2]

    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["update", "mean_reward", "eval_success", "policy_loss", "value_loss"])
            writer.writerows(rows)
    return policy, curve
