"""Point-cloud autoencoders for object features.

Shared structure: a per-point MLP followed by a coordinatewise max-pool
(permutation and duplication invariant), decoded by a plain MLP back to a
fixed-size cloud under a Chamfer reconstruction loss. The state-cloud
encoder trains on centered, randomly rotated canonical clouds; the
vision-cloud encoder trains on stored partial clouds with an extra latent
distillation term against the frozen state encoder.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .config import EncoderConfig, ExperimentConfig
from .nn import ParameterStore, Tensor, adam_step, chamfer, init_mlp, mlp_forward, mlp_forward_np
from .nn import tensor as T
from .rotation import quat_to_matrix, random_quat

ROLE_CODES = {"S": 0.0, "V": 1.0}


class TrainingDiverged(RuntimeError):
    pass


class PointCloudEncoder:
    """Per-point MLP + max-pool encoder with an MLP cloud decoder."""

    def __init__(
        self,
        latent_dim: int,
        recon_points: int,
        role: str,
        seed: int = 0,
        point_mlp: tuple[int, ...] = (64, 128),
        decoder_hidden: int = 256,
    ):
        if role not in ROLE_CODES:
            raise ValueError(f"role must be S or V, got {role!r}")
        self.latent_dim = latent_dim
        self.recon_points = recon_points
        self.role = role
        self.point_widths = [3, *point_mlp, latent_dim]
        self.decoder_widths = [latent_dim, decoder_hidden, recon_points * 3]
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        init_mlp(self.store, "enc", self.point_widths, rng)
        init_mlp(self.store, "dec", self.decoder_widths, rng)

    # numpy fast path (no graph), used for frozen encoding and observations
    def encode_batch(self, clouds: np.ndarray) -> np.ndarray:
        clouds = np.asarray(clouds, dtype=np.float32)
        squeeze = clouds.ndim == 2
        if squeeze:
            clouds = clouds[None]
        b, n, _ = clouds.shape
        feats = mlp_forward_np(self.store.arrays(), "enc", clouds.reshape(b * n, 3))
        latent = feats.reshape(b, n, self.latent_dim).max(axis=1)
        return latent[0] if squeeze else latent

    def encode(self, cloud: np.ndarray) -> np.ndarray:
        return self.encode_batch(cloud)

    # graph path for training
    def encode_t(self, clouds: Tensor) -> Tensor:
        b, n, _ = clouds.shape
        feats = mlp_forward(self.store, "enc", T.reshape(clouds, (b * n, 3)))
        return T.axis_max(T.reshape(feats, (b, n, self.latent_dim)), axis=1)

    def decode_t(self, latent: Tensor) -> Tensor:
        b = latent.shape[0]
        flat = mlp_forward(self.store, "dec", latent)
        return T.reshape(flat, (b, self.recon_points, 3))

    def checksum(self) -> int:
        return self.store.checksum()

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays = dict(self.store.arrays())
        arrays["meta.role"] = np.asarray([ROLE_CODES[self.role]])
        arrays["meta.latent_dim"] = np.asarray([float(self.latent_dim)])
        arrays["meta.recon_points"] = np.asarray([float(self.recon_points)])
        return arrays

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray]) -> "PointCloudEncoder":
        role = "S" if int(arrays["meta.role"][0]) == 0 else "V"
        latent = int(arrays["meta.latent_dim"][0])
        recon = int(arrays["meta.recon_points"][0])
        point_mlp = []
        i = 1
        while f"enc.w{i}" in arrays:
            point_mlp.append(arrays[f"enc.w{i - 1}"].shape[1])
            i += 1
        decoder_hidden = arrays["dec.w0"].shape[1]
        enc = PointCloudEncoder(latent, recon, role, 0, tuple(point_mlp), decoder_hidden)
        enc.store.load_arrays(
            {k: v for k, v in arrays.items() if k.startswith(("enc.", "dec."))}
        )
        return enc


def _batch_chamfer(inputs: np.ndarray, recon: Tensor) -> Tensor:
    """Mean Chamfer distance over a batch; inputs are constants."""
    losses = [
        chamfer(Tensor(inputs[i]), T.slice_(recon, i)) for i in range(inputs.shape[0])
    ]
    acc = losses[0]
    for term in losses[1:]:
        acc = T.add(acc, term)
    return T.scale(acc, 1.0 / len(losses))


def train_s_encoder(
    assets: list,
    cfg: ExperimentConfig,
    seed: int,
    iterations: int | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[PointCloudEncoder, list[float]]:
    """Chamfer autoencoding of centered, randomly rotated canonical clouds."""
    enc_cfg: EncoderConfig = cfg.encoder
    profile = cfg.dims
    iters = iterations if iterations is not None else enc_cfg.iterations
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5501)))
    encoder = PointCloudEncoder(
        profile.latent_dim,
        profile.cloud_points,
        "S",
        int(rng.integers(2**31)),
        enc_cfg.point_mlp,
        enc_cfg.decoder_hidden,
    )
    clouds = [a.canonical_cloud - a.canonical_cloud.mean(axis=0) for a in assets]
    losses: list[float] = []
    for _ in range(iters):
        picks = rng.integers(0, len(clouds), size=min(enc_cfg.batch_clouds, len(clouds)))
        batch = np.stack(
            [clouds[p] @ quat_to_matrix(random_quat(rng)).T for p in picks]
        ).astype(np.float32)
        x = Tensor(batch)
        recon = encoder.decode_t(encoder.encode_t(x))
        loss = _batch_chamfer(batch, recon)
        if not np.isfinite(loss.data):
            raise TrainingDiverged("non-finite reconstruction loss")
        encoder.store.zero_grad()
        loss.backward()
        adam_step(encoder.store, lr=enc_cfg.lr)
        losses.append(float(loss.data))
    if metrics_path is not None:
        _write_losses(metrics_path, losses)
    return encoder, losses


def _centered_complete_clouds(records, ts, asset_clouds) -> np.ndarray:
    """Centered world-frame complete clouds at the sampled steps.

    The stored object state embeds the pose, so the cloud at step t is the
    centered canonical cloud under the stored rotation.
    """
    out = []
    for rec, t in zip(records, ts):
        _, quat = rec.object_pose_at(t)
        canon = asset_clouds[rec.asset_id]
        out.append(canon @ quat_to_matrix(quat).T)
    return np.stack(out).astype(np.float32)


def train_v_encoder(
    index,
    s_encoder: PointCloudEncoder,
    assets: list,
    cfg: ExperimentConfig,
    seed: int,
    iterations: int | None = None,
    omega_distill: float | None = None,
    metrics_path: str | Path | None = None,
) -> tuple[PointCloudEncoder, list[float]]:
    """Partial-cloud autoencoding plus latent distillation from the frozen
    state encoder; only the vision encoder's parameters are updated."""
    from .trajectory import sample_batch

    enc_cfg: EncoderConfig = cfg.encoder
    profile = cfg.dims
    iters = iterations if iterations is not None else enc_cfg.iterations
    w_cd = enc_cfg.omega_cd
    w_distill = enc_cfg.omega_distill if omega_distill is None else omega_distill
    if s_encoder.latent_dim != profile.latent_dim:
        raise ValueError(
            f"state encoder latent {s_encoder.latent_dim} != profile {profile.latent_dim}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5502)))
    encoder = PointCloudEncoder(
        profile.latent_dim,
        profile.partial_points,
        "V",
        int(rng.integers(2**31)),
        enc_cfg.point_mlp,
        enc_cfg.decoder_hidden,
    )
    asset_clouds = {
        a.asset_id: a.canonical_cloud - a.canonical_cloud.mean(axis=0) for a in assets
    }
    frozen_before = s_encoder.checksum()

    losses: list[float] = []
    pool: list = []
    for it in range(iters):
        if it % 50 == 0:
            pool = sample_batch(index, min(32, max(4, index.total_records)), rng)
        records = [pool[int(i)] for i in rng.integers(0, len(pool), size=enc_cfg.batch_steps)]
        ts = rng.integers(0, records[0].horizon, size=enc_cfg.batch_steps)
        partial = np.stack(
            [rec.partial_clouds[t] for rec, t in zip(records, ts)]
        ).astype(np.float32)
        partial = partial - partial.mean(axis=1, keepdims=True)
        complete = _centered_complete_clouds(records, ts, asset_clouds)

        z_s = s_encoder.encode_batch(complete)          # frozen: numpy path, no graph
        x = Tensor(partial)
        z_v = encoder.encode_t(x)
        recon = encoder.decode_t(z_v)
        loss = T.scale(_batch_chamfer(partial, recon), w_cd)
        gap = T.sqrt(T.total(T.square(T.sub(z_v, Tensor(z_s))), axis=1))
        loss = T.add(loss, T.scale(T.mean(gap), w_distill))
        if not np.isfinite(loss.data):
            raise TrainingDiverged("non-finite V-encoder loss")
        encoder.store.zero_grad()
        loss.backward()
        adam_step(encoder.store, lr=enc_cfg.lr)
        losses.append(float(loss.data))
    if s_encoder.checksum() != frozen_before:
        raise AssertionError("state encoder changed during distillation")
    if metrics_path is not None:
        _write_losses(metrics_path, losses)
    return encoder, losses


def latent_gap(
    index,
    s_encoder: PointCloudEncoder,
    v_encoder: PointCloudEncoder,
    assets: list,
    n_steps: int,
    seed: int,
) -> float:
    """Mean ||z_S - z_V|| over randomly sampled held-out steps."""
    from .trajectory import sample_batch

    rng = np.random.default_rng(np.random.SeedSequence((seed, 5503)))
    records = sample_batch(index, max(4, n_steps // 32), rng)
    picks = rng.integers(0, len(records), size=n_steps)
    ts = rng.integers(0, records[0].horizon, size=n_steps)
    asset_clouds = {
        a.asset_id: a.canonical_cloud - a.canonical_cloud.mean(axis=0) for a in assets
    }
    chosen = [records[int(i)] for i in picks]
    partial = np.stack([rec.partial_clouds[t] for rec, t in zip(chosen, ts)]).astype(np.float32)
    partial = partial - partial.mean(axis=1, keepdims=True)
    complete = _centered_complete_clouds(chosen, ts, asset_clouds)
    z_s = s_encoder.encode_batch(complete)
    z_v = v_encoder.encode_batch(partial)
    return float(np.linalg.norm(z_s - z_v, axis=1).mean())


def _write_losses(path: str | Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        writer.writerows([[i + 1, loss] for i, loss in enumerate(losses)])
