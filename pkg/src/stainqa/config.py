"""Experiment configuration: one flat, human-readable JSON file.

Every run is fully described by a config plus a master seed; all
randomness flows from the master seed through named substreams, so any
stage can be re-run in isolation and reproduce its outputs. The resolved
config (defaults filled in) is persisted next to the outputs, and each
stage records a hash of it so stale artifacts are detected.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

ENV_OUT_ROOT = "STAINQA_OUT"

DEFAULTS = {
    "master_seed": 7,
    "tile_size": 64,
    "torch_threads": 2,
    "dataset": {
        "train": 300,
        "val": 50,
        "test": 400,
        "nuclei_count_range": [8, 14],
        "nuclei_radius_range": [2.5, 5.0],
        "background_texture_scale_range": [0.5, 1.0],
        "cytoplasm_density_range": [0.3, 0.55],
    },
    "translator": {
        "epochs": 44,
        "cadence": 2,
        "lr": 2e-3,
        "batch_size": 10,
        "lr_drop_epoch": 34,
        "lr_drop_factor": 0.2,
        "warmup_epochs": 24,
        "warmup_blur_sigma": 3.5,
        "warmup_flatten": 0.5,
        "adv_weight": 0.0,
        "forward_seeds": [0, 1, 2],
        "backward_seeds": [0],
        "overfit_seeds": [10, 11, 12, 13],
        "overfit_epochs": 800,
        "overfit_cadence": 50,
        "overfit_subset_size": 4,
        "overfit_keep_last": 5,
    },
    "labeling": {
        # frozen from the reference run; see labeling notes in the README
        "epoch_min": 26,
        "val_max": 0.044,
    },
    "pools": {
        "seen_forward_seeds": [0],
        "unseen_forward_seeds": [1, 2],
    },
    "classifier": {
        "num_cycles": 5,
        "num_heads": 4,
        "feature_dim": 64,
        "backbone_epochs": 25,
        "backbone_lr": 1e-3,
        "backbone_batch": 16,
        "backbone_frames_per_seq": 5,
        "head_epochs": 600,
        "head_lr": 1e-2,
        "label_smoothing": 0.04,
        "combine": "mean",
        "seed": 0,
        "alpha_mode": "min_positive",
    },
    "study": {
        "num_models": 10,
        "sample_grid": [2, 5, 10, 20],
        "repeats": 100,
        "pool_tiles": 40,
    },
    "external": {
        "models_per_class": 20,
        "tiles_per_model": 20,
        "verdict_sample_size": 20,
    },
    "hs": {
        "modes": ["blur", "contrast_fade", "stain_washout"],
        "severities": [0.3, 0.6, 0.9],
        "eval_severity": 0.45,
        "train_tiles": 60,
        "val_tiles": 20,
        "test_tiles": 40,
        "backbone_epochs": 30,
    },
    "ablation": {
        "cycle_values": [1, 5],
        "head_values": [1, 5],
        "head_seeds": [0, 1, 2, 3, 4],
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: dict) -> dict:
    ds = cfg["dataset"]
    _require(int(cfg["master_seed"]) >= 0, "master_seed must be >= 0")
    _require(cfg["tile_size"] >= 32 and cfg["tile_size"] % 16 == 0,
             "tile_size must be a multiple of 16, at least 32")
    _require(cfg["torch_threads"] >= 1, "torch_threads must be >= 1")
    for split in ("train", "val", "test"):
        _require(ds[split] >= 1, f"dataset.{split} must be >= 1")
    tr = cfg["translator"]
    _require(tr["epochs"] >= 1 and tr["cadence"] >= 1, "translator epochs/cadence must be >= 1")
    _require(tr["lr"] > 0 and tr["batch_size"] >= 1, "translator lr/batch_size invalid")
    _require(len(tr["forward_seeds"]) >= 1, "need at least one forward translator seed")
    _require(len(tr["backward_seeds"]) >= 1, "need at least one backward translator seed")
    _require(tr["overfit_subset_size"] >= 1, "overfit_subset_size must be >= 1")
    lb = cfg["labeling"]
    _require(lb["epoch_min"] >= 0 and lb["val_max"] > 0, "labeling thresholds invalid")
    pools = cfg["pools"]
    seen = set(pools["seen_forward_seeds"])
    unseen = set(pools["unseen_forward_seeds"])
    _require(seen and unseen, "both seen and unseen pools need seeds")
    _require(not (seen & unseen), "seen and unseen pools must be disjoint")
    _require((seen | unseen) <= set(tr["forward_seeds"]),
             "pool seeds must be trained forward seeds")
    cl = cfg["classifier"]
    _require(cl["num_cycles"] >= 1, "classifier.num_cycles must be >= 1")
    _require(cl["num_heads"] >= 1, "classifier.num_heads must be >= 1")
    _require(cl["combine"] in ("mean", "majority"), "classifier.combine invalid")
    _require(cl["alpha_mode"] in ("min_positive", "midpoint"), "classifier.alpha_mode invalid")
    st = cfg["study"]
    _require(st["num_models"] >= 2 and st["num_models"] % 2 == 0,
             "study.num_models must be an even count (1:1 class ratio)")
    _require(st["repeats"] >= 1, "study.repeats must be >= 1")
    _require(max(st["sample_grid"]) <= st["pool_tiles"],
             "study sample sizes cannot exceed the tile pool")
    _require(st["pool_tiles"] <= ds["test"], "study.pool_tiles cannot exceed dataset.test")
    hs = cfg["hs"]
    _require(len(hs["severities"]) >= 1, "hs.severities must be nonempty")
    for sev in list(hs["severities"]) + [hs["eval_severity"]]:
        _require(0.0 < float(sev) <= 1.0, "hs severities must lie in (0, 1]")
    _require(hs["train_tiles"] + hs["val_tiles"] + hs["test_tiles"] <= ds["test"],
             "hs benchmark tiles must fit in the test split")
    ab = cfg["ablation"]
    _require(all(v >= 1 for v in ab["cycle_values"]), "ablation cycle values must be >= 1")
    _require(max(ab["cycle_values"]) <= cl["num_cycles"],
             "ablation cycle values cannot exceed classifier.num_cycles")
    _require(len(ab["head_seeds"]) >= 1, "ablation.head_seeds must be nonempty")
    ex = cfg["external"]
    _require(ex["models_per_class"] >= 1, "external.models_per_class must be >= 1")
    _require(ex["verdict_sample_size"] <= ex["tiles_per_model"],
             "external verdict sample cannot exceed its tile pool")
    return cfg


def resolve(overrides: dict | None = None, master_seed: int | None = None) -> dict:
    """Defaults merged with overrides, then validated."""
    cfg = _merge(DEFAULTS, overrides or {})
    if master_seed is not None:
        cfg["master_seed"] = int(master_seed)
    return validate(cfg)


def load(path, master_seed: int | None = None) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(overrides, dict):
        raise ConfigError("config root must be a JSON object")
    return resolve(overrides, master_seed=master_seed)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def dump(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def output_root(cli_out: str | None) -> Path:
    """Output directory from --out, the environment, or the cwd default."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(ENV_OUT_ROOT)
    if env:
        return Path(env)
    return Path("runs") / "default"
