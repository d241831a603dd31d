"""Command-line surface for the grasp pipeline.

Every command prints one JSON summary line on success and exits nonzero
with a message on stderr otherwise. The --threads flag caps BLAS thread
pools and must take effect before numpy loads, so heavy imports happen
inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_SPLIT_KEYS = {
    "seen": "seen",
    "unseen-seen": "unseen_seen_cat",
    "unseen-unseen": "unseen_unseen_cat",
}


class CommandError(RuntimeError):
    pass


def _apply_threads(argv: list[str]) -> None:
    for i, arg in enumerate(argv):
        value = None
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
        if value is not None:
            for key in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[key] = value
            return


def _load_cfg(args) -> "ExperimentConfig":
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if args.profile:
        cfg.profile = args.profile
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _load_model(path: str):
    from .encoders import PointCloudEncoder
    from .nn import read_checkpoint
    from .ppo import SpecialistPolicy
    from .universal import UniversalPolicy

    arrays = read_checkpoint(path)
    kind = int(arrays["meta.kind"][0]) if "meta.kind" in arrays else -1
    if kind == 0:
        return SpecialistPolicy.from_arrays(arrays), None
    if kind == 1:
        encoder_arrays = {
            k[len("encoder.") :]: v for k, v in arrays.items() if k.startswith("encoder.")
        }
        model_arrays = {k: v for k, v in arrays.items() if not k.startswith("encoder.")}
        encoder = PointCloudEncoder.from_arrays(encoder_arrays) if encoder_arrays else None
        return UniversalPolicy.from_arrays(model_arrays), encoder
    raise CommandError(f"{path}: not a policy checkpoint")


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------------------
# handlers


def cmd_gen_objects(args) -> None:
    from .assets import save_asset_set
    from .pipeline import make_assets

    cfg = _load_cfg(args)
    sets = make_assets(cfg)
    path = save_asset_set(args.out, sets)
    _emit(
        {
            "command": "gen-objects",
            "manifest": str(path),
            "seen": len(sets["seen"]),
            "unseen_seen_cat": len(sets["unseen_seen_cat"]),
            "unseen_unseen_cat": len(sets["unseen_unseen_cat"]),
            "config_checksum": cfg.checksum(),
        }
    )


def cmd_train_specialist(args) -> None:
    from .nn import write_checkpoint
    from .pipeline import find_asset, make_assets, make_splits
    from .ppo import train_specialist

    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg.seed = args.seed
    asset = find_asset(make_assets(cfg), args.asset)
    splits = make_splits(cfg, asset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy, curve = train_specialist(
        asset, splits, cfg, cfg.seed, metrics_path=out / "metrics.csv"
    )
    ckpt = out / f"specialist_{asset.asset_id}.ugnn"
    write_checkpoint(ckpt, policy.to_arrays())
    _emit(
        {
            "command": "train-specialist",
            "asset": asset.asset_id,
            "checkpoint": str(ckpt),
            "best_eval_success": max((rate for _, rate in curve), default=0.0),
            "checkpoints_evaluated": len(curve),
            "config_checksum": cfg.checksum(),
        }
    )


def cmd_gen_trajectories(args) -> None:
    from .pipeline import find_asset, make_assets, make_splits
    from .trajectory import generate_trajectories

    cfg = _load_cfg(args)
    asset = find_asset(make_assets(cfg), args.asset)
    splits = make_splits(cfg, asset)
    policy, _ = _load_model(args.policy)
    path, attempts = generate_trajectories(
        policy, asset, splits.generation, args.m, cfg, cfg.seed, args.out
    )
    _emit(
        {
            "command": "gen-trajectories",
            "asset": asset.asset_id,
            "records": args.m,
            "attempts": attempts,
            "file": str(path),
            "config_checksum": cfg.checksum(),
        }
    )


def cmd_train_encoder(args) -> None:
    from .assets import load_asset_set
    from .encoders import train_s_encoder, train_v_encoder
    from .nn import read_checkpoint, write_checkpoint
    from .pipeline import make_assets
    from .trajectory import DatasetIndex

    cfg = _load_cfg(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "state":
        data = Path(args.data)
        sets = load_asset_set(data) if (data / "assets.json").exists() else make_assets(cfg)
        encoder, losses = train_s_encoder(
            sets["seen"], cfg, cfg.seed, metrics_path=out / "encoder_s_losses.csv"
        )
        ckpt = out / "encoder_s.ugnn"
    else:
        if not args.s_encoder:
            raise CommandError("--s-encoder is required in vision mode")
        from .encoders import PointCloudEncoder

        index = DatasetIndex.load(args.data)
        s_encoder = PointCloudEncoder.from_arrays(read_checkpoint(args.s_encoder))
        sets = make_assets(cfg)
        encoder, losses = train_v_encoder(
            index, s_encoder, sets["seen"], cfg, cfg.seed,
            metrics_path=out / "encoder_v_losses.csv",
        )
        ckpt = out / "encoder_v.ugnn"
    write_checkpoint(ckpt, encoder.to_arrays())
    _emit(
        {
            "command": "train-encoder",
            "mode": args.mode,
            "checkpoint": str(ckpt),
            "final_loss": losses[-1],
            "config_checksum": cfg.checksum(),
        }
    )


def cmd_train_universal(args) -> None:
    from .config import PROFILES
    from .encoders import PointCloudEncoder
    from .nn import read_checkpoint, write_checkpoint
    from .pipeline import make_assets
    from .trajectory import DatasetIndex
    from .universal import UniversalPolicy, train_universal

    cfg = _load_cfg(args)
    if args.dry_run:
        model = UniversalPolicy(
            PROFILES[cfg.profile], args.setting, cfg.universal.blocks,
            cfg.seed, cfg.universal.input_mask, cfg.universal.vision_estimation,
        )
        _emit({"command": "train-universal", "dry_run": True, **model.shape_report()})
        return
    if not args.data or not args.encoder:
        raise CommandError("--data and --encoder are required unless --dry-run")
    index = DatasetIndex.load(args.data)
    encoder = PointCloudEncoder.from_arrays(read_checkpoint(args.encoder))
    encoders = {encoder.role: encoder}
    sets = make_assets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, losses = train_universal(
        index, args.setting, cfg, encoders, sets["seen"], cfg.seed,
        metrics_path=out / "distill_metrics.csv",
    )
    arrays = model.to_arrays()
    for name, value in encoder.to_arrays().items():
        arrays[f"encoder.{name}"] = value
    ckpt = out / f"universal_{args.setting}.ugnn"
    write_checkpoint(ckpt, arrays)
    _emit(
        {
            "command": "train-universal",
            "setting": args.setting,
            "checkpoint": str(ckpt),
            "final_loss": losses[-1],
            "epochs": len(losses),
            "config_checksum": cfg.checksum(),
        }
    )


def cmd_eval(args) -> None:
    import csv as _csv

    from .evaluate import evaluate
    from .pipeline import make_assets, make_splits
    from .ppo import SpecialistPolicy

    cfg = _load_cfg(args)
    sets = make_assets(cfg)
    split_key = _SPLIT_KEYS[args.split]
    assets = sets[split_key]
    if not assets:
        raise CommandError(f"empty split {args.split!r}")
    model, encoder = _load_model(args.model)
    if args.setting and not isinstance(model, SpecialistPolicy):
        if model.setting != args.setting:
            raise CommandError(
                f"--setting {args.setting} but checkpoint was trained for {model.setting}"
            )
    if isinstance(model, SpecialistPolicy):
        assets = [a for a in assets if a.asset_id == model.asset_id]
        if not assets:
            raise CommandError(
                f"specialist for asset {model.asset_id} has no asset in split {args.split!r}"
            )
    pairs = [(asset, make_splits(cfg, asset).evaluation) for asset in assets]
    report = evaluate(model, pairs, cfg, encoder=encoder, split_name=args.split)
    result = report.splits[args.split]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["split", "asset_id", "successes", "rollouts", "rate", "model_checksum"])
        writer.writerows(report.to_rows())
    _emit(
        {
            "command": "eval",
            "split": args.split,
            "successes": result.successes,
            "rollouts": result.rollouts,
            "success_rate": result.rate,
            "csv": str(out),
            "model_checksum": report.model_checksum,
            "config_checksum": cfg.checksum(),
        }
    )


def cmd_diversity(args) -> None:
    from .evaluate import diversity_curves, diversity_svg, pooled_band_area
    from .pipeline import make_assets, make_splits
    from .ppo import SpecialistPolicy

    cfg = _load_cfg(args)
    sets = make_assets(cfg)
    model, encoder = _load_model(args.model)
    assets = sets["seen"]
    if isinstance(model, SpecialistPolicy):
        assets = [a for a in assets if a.asset_id == model.asset_id]
        if not assets:
            raise CommandError(f"specialist asset {model.asset_id} not in the seen set")
    pairs = [(asset, make_splits(cfg, asset).evaluation) for asset in assets]
    curves = diversity_curves(model, pairs, cfg, encoder=encoder)
    svg = diversity_svg(curves)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg)
    _emit(
        {
            "command": "diversity",
            "svg": str(out),
            "band_area": pooled_band_area(list(curves.values())),
            "assets": len(curves),
            "flagged": any(s.flagged for s in curves.values()),
            "rollouts": sum(len(s.curves) for s in curves.values()),
        }
    )


def cmd_ablate(args) -> None:
    from .ablation import run_ablation

    workdir = args.workdir or str(Path(args.out).with_suffix("")) + "_work"
    rows = run_ablation(args.matrix, args.out, workdir)
    _emit(
        {
            "command": "ablate",
            "csv": str(args.out),
            "variants": len(rows),
            "ok": sum(1 for r in rows if r["status"] == "ok"),
        }
    )


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskgrasp",
        description="desk-scale grasp pipeline: specialists, trajectories, distillation",
    )
    parser.add_argument("--profile", choices=["desk", "paper-dims"], default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-objects", help="generate procedural assets")
    p.add_argument("--config", required=False)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_objects)

    p = sub.add_parser("train-specialist", help="train one per-object policy")
    p.add_argument("--config", required=False)
    p.add_argument("--asset", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_specialist)

    p = sub.add_parser("gen-trajectories", help="harvest successful rollouts")
    p.add_argument("--config", required=False)
    p.add_argument("--asset", type=int, required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("-M", dest="m", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_trajectories)

    p = sub.add_parser("train-encoder", help="train a point-cloud autoencoder")
    p.add_argument("--mode", choices=["state", "vision"], required=True)
    p.add_argument("--config", required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--s-encoder", dest="s_encoder", required=False)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_encoder)

    p = sub.add_parser("train-universal", help="distill trajectories into one network")
    p.add_argument("--setting", choices=["state", "vision"], required=True)
    p.add_argument("--config", required=False)
    p.add_argument("--data", required=False)
    p.add_argument("--encoder", required=False)
    p.add_argument("--out", required=False, default=".")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(handler=cmd_train_universal)

    p = sub.add_parser("eval", help="success rates on a split")
    p.add_argument("--setting", choices=["state", "vision"], required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=list(_SPLIT_KEYS), required=True)
    p.add_argument("--config", required=False)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("diversity", help="grasp-diversity band plot")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=False)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_diversity)

    p = sub.add_parser("ablate", help="run an ablation matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workdir", required=False)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
