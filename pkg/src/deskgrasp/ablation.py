"""Ablation-matrix runner: each variant is a full desk-scale pipeline.

The matrix TOML names a base config plus variants with dotted config
overrides; every variant runs asset generation, specialist training,
trajectory harvesting, encoder and universal training, and evaluation,
through the cached pipeline stages so variants share identical upstream
artifacts whenever their configs agree. One CSV row per variant; a
variant failure marks its row and the matrix continues.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .config import ConfigError, ExperimentConfig, apply_overrides, config_from_dict, load_config
from .evaluate import evaluate
from .pipeline import Pipeline


def load_matrix(path: str | Path) -> tuple[ExperimentConfig, list[dict]]:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    if "config" in data:
        base = load_config(Path(path).parent / data.pop("config"))
    elif "base" in data:
        base = config_from_dict(data.pop("base"))
    else:
        base = ExperimentConfig()
        data.pop("base", None)
    variants = data.pop("variants", [])
    if not variants:
        raise ConfigError(f"{path}: matrix has no [[variants]]")
    for variant in variants:
        if "name" not in variant:
            raise ConfigError(f"{path}: every variant needs a name")
    return base, variants


def run_variant(cfg: ExperimentConfig, variant: dict, workdir: Path) -> dict:
    """One end-to-end pipeline run; returns the CSV row fields."""
    target = variant.get("evaluate", "universal")
    setting = variant.get("setting", "state")
    pipe = Pipeline(cfg, workdir)
    assets = pipe.seen_assets()
    rollouts = cfg.eval.rollouts_per_asset

    if target == "specialists":
        wins = rollouts_total = 0
        for asset in assets:
            policy, _ = pipe.specialist(asset)
            report = evaluate(
                policy, [(asset, pipe.splits(asset).evaluation)], cfg, rollouts
            )
            result = report.splits["seen"]
            wins += result.successes
            rollouts_total += result.rollouts
        return {"successes": wins, "rollouts": rollouts_total, "rate": wins / rollouts_total}

    index = pipe.trajectories()
    s_enc = pipe.s_encoder()
    encoders = {"S": s_enc}
    if setting == "vision":
        encoders["V"] = pipe.v_encoder(index, s_enc)
    model, losses = pipe.universal(index, setting, encoders)
    pairs = [(asset, pipe.splits(asset).evaluation) for asset in assets]
    report = evaluate(
        model, pairs, cfg, rollouts, encoder=encoders.get("V" if setting == "vision" else "S")
    )
    result = report.splits["seen"]
    return {
        "successes": result.successes,
        "rollouts": result.rollouts,
        "rate": result.rate,
        "final_loss": losses[-1],
    }


def run_ablation(
    matrix_path: str | Path, out_csv: str | Path, workdir: str | Path
) -> list[dict]:
    base, variants = load_matrix(matrix_path)
    workdir = Path(workdir)
    rows = []
    for variant in variants:
        overrides = dict(variant.get("overrides", {}))
        try:
            cfg = apply_overrides(base, overrides) if overrides else base
            outcome = run_variant(cfg, variant, workdir)
            row = {
                "variant": variant["name"],
                "axis": variant.get("axis", ""),
                "value": variant.get("value", ""),
                "setting": variant.get("setting", "state"),
                "successes": outcome["successes"],
                "rollouts": outcome["rollouts"],
                "success_rate": outcome["rate"],
                "config_checksum": cfg.checksum(),
                "status": "ok",
            }
        except Exception as exc:  # noqa: BLE001 - a variant failure must not kill the matrix
            row = {
                "variant": variant["name"],
                "axis": variant.get("axis", ""),
                "value": variant.get("value", ""),
                "setting": variant.get("setting", "state"),
                "successes": "",
                "rollouts": "",
                "success_rate": "",
                "config_checksum": "",
                "status": f"error: {exc}",
            }
        rows.append(row)

    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return rows
