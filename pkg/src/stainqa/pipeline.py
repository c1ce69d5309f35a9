"""End-to-end experiment stages.

Each stage reads upstream artifacts from the run directory, writes its own
versioned outputs plus a completion marker carrying the resolved config
hash, and refuses to run when a dependency is missing or was produced
under a different config. Stages are deterministic functions of (config,
upstream artifacts); deleting any stage's outputs and re-running
regenerates identical files.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .arrayio import load_arrays, save_arrays
from .calibrate import (
    CalibrationResult,
    ModelVerdict,
    calibrate_alpha,
    calibrate_beta,
    resampling_study,
)
from .ensemble import (
    Backbone,
    ScoreRecord,
    load_heads,
    pretrain_backbone,
    save_heads,
    score_features,
    train_heads,
)
from .metrics import auc, confusion, kl_divergence, mse, pcc, psnr, welch_t
from .scoring import StainedImageScorer
from .seeding import substream
from .synth import DatasetConfig, TileStore, build_dataset
from .tables import write_csv
from .translate import Checkpoint, StainTranslator, label_checkpoint
from .hsbench import build_hs_benchmark, materialize, run_hs_assessment


class StageError(RuntimeError):
    exit_code = 1


class StageConfigError(StageError):
    exit_code = 2


class StageDependencyError(StageError):
    exit_code = 3


class RunPaths:
    """Canonical artifact locations inside one run directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def config(self):
        return self.root / "config.json"

    @property
    def stages(self):
        return self.root / "stages.json"

    @property
    def data(self):
        return self.root / "data"

    @property
    def translators(self):
        return self.root / "translators"

    @property
    def checkpoints(self):
        return self.translators / "checkpoints"

    @property
    def pools(self):
        return self.root / "pools" / "pools.json"

    @property
    def classifier(self):
        return self.root / "classifier"

    @property
    def calibration(self):
        return self.root / "calibration" / "calibration.json"

    @property
    def scores(self):
        return self.root / "scores"

    @property
    def study(self):
        return self.root / "model_assessment"

    @property
    def external(self):
        return self.root / "external"

    @property
    def ablations(self):
        return self.root / "ablations"

    @property
    def hs(self):
        return self.root / "hs"

    @property
    def report(self):
        return self.root / "report"

    @property
    def logs(self):
        return self.root / "logs"

    def checkpoint_path(self, ckpt_id: str):
        return self.checkpoints / f"{ckpt_id}.arr"


def _read_stages(paths: RunPaths) -> dict:
    if not paths.stages.exists():
        return {}
    with open(paths.stages, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _mark_stage(paths: RunPaths, stage: str, cfg: dict, duration: float) -> None:
    stages = _read_stages(paths)
    stages[stage] = {
        "config_hash": config_mod.config_hash(cfg),
        "duration_s": round(duration, 3),
    }
    with open(paths.stages, "w", encoding="utf-8") as fh:
        json.dump(stages, fh, indent=2, sort_keys=True)
        fh.write("\n")


def require_stage(paths: RunPaths, cfg: dict, *deps: str) -> None:
    stages = _read_stages(paths)
    want = config_mod.config_hash(cfg)
    for dep in deps:
        if dep not in stages:
            raise StageDependencyError(
                f"stage {dep!r} has not been run in {paths.root}; run it first"
            )
        if stages[dep]["config_hash"] != want:
            raise StageConfigError(
                f"stage {dep!r} was produced under a different config "
                f"(hash {stages[dep]['config_hash'][:12]} != {want[:12]}); rerun it"
            )


def _log(paths: RunPaths, stage: str, message: str) -> None:
    paths.logs.mkdir(parents=True, exist_ok=True)
    with open(paths.logs / f"{stage}.log", "a", encoding="utf-8") as fh:
        fh.write(message + "\n")


# ---------------------------------------------------------------------------
# data access helpers


def _store(paths: RunPaths) -> TileStore:
    return TileStore(paths.data)

def _split_ids(paths: RunPaths) -> dict:
    manifests = _store(paths).load_manifests()
    return {split: m.tile_ids for split, m in manifests.items()}


def _load_stacks(paths: RunPaths, tile_ids: list):
    store = _store(paths)
    afs, hes = [], []
    for tile_id in tile_ids:
        af, he = store.load_pair(tile_id)
        afs.append(af.pixels)
        hes.append(he.pixels)
    return np.stack(afs), np.stack(hes)


class _CheckpointCache:
    def __init__(self, paths: RunPaths):
        self.paths = paths
        self._cache = {}

    def get(self, ckpt_id: str) -> Checkpoint:
        if ckpt_id not in self._cache:
            path = self.paths.checkpoint_path(ckpt_id)
            if not path.exists():
                raise StageDependencyError(f"checkpoint {ckpt_id!r} not found at {path}")
            self._cache[ckpt_id] = Checkpoint.load(path)
        return self._cache[ckpt_id]


def _load_pools(paths: RunPaths) -> dict:
    if not paths.pools.exists():
        raise StageDependencyError(f"pools file missing: {paths.pools}")
    with open(paths.pools, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _generate_images(cache: _CheckpointCache, assigned_ckpts: list, af_stack: np.ndarray):
    """Stain every tile with its assigned checkpoint, batched per model."""
    out = np.empty((af_stack.shape[0],) + af_stack.shape[1:3] + (3,), dtype=np.float32)
    by_ckpt = {}
    for i, ckpt_id in enumerate(assigned_ckpts):
        by_ckpt.setdefault(ckpt_id, []).append(i)
    for ckpt_id, idx in sorted(by_ckpt.items()):
        ckpt = cache.get(ckpt_id)
        out[idx] = ckpt.apply_stack(af_stack[idx])
    return out


def _scorer(paths: RunPaths, cfg: dict, cache: _CheckpointCache) -> StainedImageScorer:
    pools = _load_pools(paths)
    backbone = Backbone.load(paths.classifier / "backbone.arr")
    heads = load_heads(paths.classifier / "heads.arr")
    return StainedImageScorer(
        vs=cache.get(pools["deployment"]["vs"]),
        vaf=cache.get(pools["deployment"]["vaf"]),
        backbone=backbone,
        heads=heads,
        num_cycles=cfg["classifier"]["num_cycles"],
        combine=cfg["classifier"]["combine"],
    )


def _records_to_rows(records: list) -> list:
    rows = []
    for r in records:
        row = {
            "tile_id": r.tile_id,
            "label_true": r.label_true,
            "source_ckpt_id": r.source_ckpt_id,
            "mean_score": r.mean_score,
            "num_cycles": r.num_cycles,
            "num_heads": r.num_heads,
            "vs_ckpt_id": r.vs_ckpt_id,
            "vaf_ckpt_id": r.vaf_ckpt_id,
        }
        for i, s in enumerate(r.per_head_scores):
            row[f"head_{i}"] = s
        rows.append(row)
    return rows


def _score_fieldnames(num_heads: int) -> list:
    return [
        "tile_id",
        "label_true",
        "source_ckpt_id",
        "mean_score",
        *[f"head_{i}" for i in range(num_heads)],
        "num_cycles",
        "num_heads",
        "vs_ckpt_id",
        "vaf_ckpt_id",
    ]


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(paths: RunPaths, cfg: dict, force: bool = False) -> None:
    ds = cfg["dataset"]
    dataset_cfg = DatasetConfig(
        train=ds["train"],
        val=ds["val"],
        test=ds["test"],
        master_seed=cfg["master_seed"],
        tile_size=cfg["tile_size"],
        nuclei_count_range=tuple(ds["nuclei_count_range"]),
        nuclei_radius_range=tuple(ds["nuclei_radius_range"]),
        background_texture_scale_range=tuple(ds["background_texture_scale_range"]),
        cytoplasm_density_range=tuple(ds["cytoplasm_density_range"]),
    )
    manifests = build_dataset(dataset_cfg, paths.data, force=force)
    _log(paths, "gen-data", f"generated splits: { {k: len(m.tile_ids) for k, m in manifests.items()} }")


def _train_one(paths, cfg, direction, seed, regime, af_tr, he_tr, af_val, he_val):
    tr = cfg["translator"]
    overfit = regime == "overfit_subset"
    est = StainTranslator(
        direction=direction,
        epochs=tr["overfit_epochs"] if overfit else tr["epochs"],
        lr=tr["lr"],
        batch_size=tr["batch_size"],
        cadence=tr["overfit_cadence"] if overfit else tr["cadence"],
        lr_drop_epoch=tr["overfit_epochs"] // 2 if overfit else tr["lr_drop_epoch"],
        lr_drop_factor=tr["lr_drop_factor"],
        regime=regime,
        subset_size=tr["overfit_subset_size"],
        adv_weight=tr["adv_weight"],
        warmup_epochs=0 if overfit else tr["warmup_epochs"],
        warmup_blur_sigma=tr["warmup_blur_sigma"],
        warmup_flatten=tr["warmup_flatten"],
        val_cadence=tr["overfit_cadence"] if overfit else 1,
        seed=seed,
        threads=cfg["torch_threads"],
    )
    if direction == "af_to_he":
        est.fit(af_tr, he_tr, af_val, he_val)
    else:
        est.fit(he_tr, af_tr, he_val, af_val)
    return est


def stage_train_translators(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "gen-data")
    ids = _split_ids(paths)
    af_tr, he_tr = _load_stacks(paths, ids["train"])
    af_val, he_val = _load_stacks(paths, ids["val"])
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    tr = cfg["translator"]
    runs = {}
    jobs = (
        [("af_to_he", s, "full") for s in tr["forward_seeds"]]
        + [("he_to_af", s, "full") for s in tr["backward_seeds"]]
        + [("af_to_he", s, "overfit_subset") for s in tr["overfit_seeds"]]
    )
    for direction, seed, regime in jobs:
        t0 = time.monotonic()
        est = _train_one(paths, cfg, direction, seed, regime, af_tr, he_tr, af_val, he_val)
        run_name = f"{direction}.s{seed}.{regime}"
        for ckpt in est.checkpoints_:
            ckpt.save(paths.checkpoint_path(ckpt.ckpt_id))
        write_csv(
            paths.translators / f"history_{run_name}.csv",
            ["epoch", "train_loss", "val_loss"],
            est.history_,
        )
        runs[run_name] = {
            "direction": direction,
            "seed": seed,
            "regime": regime,
            "ckpt_ids": [c.ckpt_id for c in est.checkpoints_],
            "final_val_loss": est.checkpoints_[-1].val_loss,
        }
        _log(
            paths,
            "train-translators",
            f"{run_name}: {len(est.checkpoints_)} checkpoints, "
            f"final val {est.checkpoints_[-1].val_loss:.5f} "
            f"({time.monotonic() - t0:.1f}s)",
        )
    with open(paths.translators / "runs.json", "w", encoding="utf-8") as fh:
        json.dump(runs, fh, indent=2, sort_keys=True)
        fh.write("\n")


def stage_pool_checkpoints(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "train-translators")
    with open(paths.translators / "runs.json", "r", encoding="utf-8") as fh:
        runs = json.load(fh)
    lb = cfg["labeling"]
    tr = cfg["translator"]
    labels = {}
    pools = {
        "seen": {"good": [], "poor_early": []},
        "unseen": {"good": [], "poor_early": []},
        "overfit": [],
        "backward": [],
    }
    seen = set(cfg["pools"]["seen_forward_seeds"])
    unseen = set(cfg["pools"]["unseen_forward_seeds"])
    for run_name in sorted(runs):
        info = runs[run_name]
        for ckpt_id in info["ckpt_ids"]:
            path = paths.checkpoint_path(ckpt_id)
            ckpt = Checkpoint.load(path)
            if info["direction"] == "he_to_af":
                pools["backward"].append({"ckpt_id": ckpt_id, "val_loss": ckpt.val_loss})
                continue
            label = label_checkpoint(ckpt, lb["epoch_min"], lb["val_max"])
            labels[ckpt_id] = {"label": label, "epoch": ckpt.epoch, "val_loss": ckpt.val_loss}
            ckpt.quality_label = label
            ckpt.save(path)
            if label == "poor_overfit":
                continue  # overfit pool membership handled per run below
            if info["seed"] in seen:
                pools["seen"][label].append(ckpt_id)
            elif info["seed"] in unseen:
                pools["unseen"][label].append(ckpt_id)
    for run_name in sorted(runs):
        info = runs[run_name]
        if info["regime"] == "overfit_subset":
            keep = info["ckpt_ids"][-tr["overfit_keep_last"]:]
            pools["overfit"].extend(keep)

    for group in ("seen", "unseen"):
        for label in ("good", "poor_early"):
            if not pools[group][label]:
                raise StageConfigError(f"{group} {label} checkpoint pool is empty; "
                                       "adjust labeling thresholds or training seeds")
    if not pools["backward"]:
        raise StageConfigError("no backward checkpoints trained")
    ex = cfg["external"]
    for label in ("good", "poor_early"):
        if len(pools["unseen"][label]) < ex["models_per_class"]:
            raise StageConfigError(
                f"unseen {label} pool ({len(pools['unseen'][label])}) smaller than "
                f"external.models_per_class ({ex['models_per_class']})"
            )
    if len(pools["overfit"]) < ex["models_per_class"]:
        raise StageConfigError("overfit pool smaller than external.models_per_class")

    best_fwd = min(pools["seen"]["good"], key=lambda c: labels[c]["val_loss"])
    best_bwd = min(pools["backward"], key=lambda c: c["val_loss"])["ckpt_id"]
    payload = {
        "labels": labels,
        "pools": {k: v for k, v in pools.items() if k != "backward"},
        "backward": pools["backward"],
        "deployment": {"vs": best_fwd, "vaf": best_bwd},
        "thresholds": {"epoch_min": lb["epoch_min"], "val_max": lb["val_max"]},
    }
    paths.pools.parent.mkdir(parents=True, exist_ok=True)
    with open(paths.pools, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _log(
        paths,
        "pool-checkpoints",
        f"seen good/early: {len(pools['seen']['good'])}/{len(pools['seen']['poor_early'])}, "
        f"unseen good/early: {len(pools['unseen']['good'])}/{len(pools['unseen']['poor_early'])}, "
        f"overfit: {len(pools['overfit'])}, deployment vs={best_fwd} vaf={best_bwd}",
    )


def _assign_sources(cfg: dict, pools: dict, tile_ids: list, split: str):
    """Per tile: one good and one poor_early checkpoint from the seen pools."""
    good_pool = sorted(pools["pools"]["seen"]["good"])
    early_pool = sorted(pools["pools"]["seen"]["poor_early"])
    assignments = []
    for tile_id in tile_ids:
        rng = substream(cfg["master_seed"], "image-source", split, tile_id)
        assignments.append(
            {
                "tile_id": tile_id,
                "good": good_pool[int(rng.integers(len(good_pool)))],
                "poor": early_pool[int(rng.integers(len(early_pool)))],
            }
        )
    return assignments


def _build_labeled_images(paths, cfg, cache, pools, tile_ids, split):
    """Stained images for one split: a negative and a positive per tile."""
    af_stack, _ = _load_stacks(paths, tile_ids)
    assignments = _assign_sources(cfg, pools, tile_ids, split)
    neg = _generate_images(cache, [a["good"] for a in assignments], af_stack)
    pos = _generate_images(cache, [a["poor"] for a in assignments], af_stack)
    images = np.concatenate([neg, pos])
    labels = np.array([0] * len(tile_ids) + [1] * len(tile_ids))
    ids = [f"{t}#neg" for t in tile_ids] + [f"{t}#pos" for t in tile_ids]
    sources = [a["good"] for a in assignments] + [a["poor"] for a in assignments]
    return images, labels, ids, sources, assignments


def stage_train_classifier(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "gen-data", "train-translators", "pool-checkpoints")
    cl = cfg["classifier"]
    pools = _load_pools(paths)
    cache = _CheckpointCache(paths)
    ids = _split_ids(paths)
    vs = cache.get(pools["deployment"]["vs"])
    vaf = cache.get(pools["deployment"]["vaf"])

    from .cycle import run_cycles_stack

    def cycled(images):
        chunks = []
        for start in range(0, images.shape[0], 50):
            chunks.append(run_cycles_stack(images[start : start + 50], vs, vaf, cl["num_cycles"]))
        return np.concatenate(chunks)

    train_imgs, train_labels, train_ids, train_sources, assignments = _build_labeled_images(
        paths, cfg, cache, pools, ids["train"], "train"
    )
    frames_train = cycled(train_imgs)
    del train_imgs
    neg_frames = frames_train[train_labels == 0]
    step = max(1, cl["num_cycles"] // cl["backbone_frames_per_seq"])
    neg_frames = neg_frames[:, ::step].reshape(-1, *frames_train.shape[2:])
    backbone, history = pretrain_backbone(
        neg_frames,
        feature_dim=cl["feature_dim"],
        epochs=cl["backbone_epochs"],
        lr=cl["backbone_lr"],
        batch_size=cl["backbone_batch"],
        seed=cl["seed"],
        threads=cfg["torch_threads"],
    )
    del neg_frames
    paths.classifier.mkdir(parents=True, exist_ok=True)
    backbone.save(paths.classifier / "backbone.arr")
    write_csv(paths.classifier / "backbone_history.csv", ["epoch", "recon_loss"], history)

    feats_train = backbone.encode_sequences(frames_train)
    del frames_train
    heads = train_heads(
        feats_train,
        train_labels,
        num_heads=cl["num_heads"],
        seed=cl["seed"],
        epochs=cl["head_epochs"],
        lr=cl["head_lr"],
        label_smoothing=cl["label_smoothing"],
        threads=cfg["torch_threads"],
    )
    save_heads(heads, paths.classifier / "heads.arr")

    val_imgs, val_labels, val_ids, val_sources, val_assignments = _build_labeled_images(
        paths, cfg, cache, pools, ids["val"], "val"
    )
    frames_val = cycled(val_imgs)
    del val_imgs
    feats_val = backbone.encode_sequences(frames_val)
    del frames_val

    for name, feats, labels, img_ids, sources in (
        ("train", feats_train, train_labels, train_ids, train_sources),
        ("val", feats_val, val_labels, val_ids, val_sources),
    ):
        save_arrays(
            paths.classifier / f"features_{name}.arr",
            {"features": feats.astype(np.float32), "labels": np.asarray(labels, dtype=np.int64)},
            meta={"image_ids": img_ids, "source_ckpt_ids": sources},
        )
        per_head, mean = score_features(feats, heads)
        records = [
            ScoreRecord(
                tile_id=img_ids[i],
                per_head_scores=[float(s) for s in per_head[i]],
                mean_score=float(per_head[i].mean()),
                label_true="positive" if labels[i] else "negative",
                source_ckpt_id=sources[i],
                vs_ckpt_id=vs.ckpt_id,
                vaf_ckpt_id=vaf.ckpt_id,
                num_cycles=cl["num_cycles"],
                num_heads=cl["num_heads"],
            )
            for i in range(len(img_ids))
        ]
        write_csv(
            paths.classifier / f"{name}_scores.csv",
            _score_fieldnames(cl["num_heads"]),
            _records_to_rows(records),
        )
    with open(paths.classifier / "assignments.json", "w", encoding="utf-8") as fh:
        json.dump({"train": assignments, "val": val_assignments}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _log(
        paths,
        "train-classifier",
        f"backbone recon {backbone.recon_loss:.5f} hash {backbone.weight_hash()[:12]}, "
        f"{len(heads)} heads trained on {feats_train.shape[0]} sequences",
    )


def _load_score_rows(path) -> list:
    from .tables import read_csv

    return read_csv(path)


def stage_calibrate(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "train-classifier")
    cl = cfg["classifier"]
    # score from the cached features, not the 9-digit CSV: alpha must sit
    # exactly at the lowest positive score, and CSV rounding can nudge it
    # above scores it is supposed to match
    val = load_arrays(paths.classifier / "features_val.arr")
    feats, meta = val[0], val[1]
    heads = load_heads(paths.classifier / "heads.arr")
    _, mean_scores = score_features(feats["features"], heads)
    records = [
        ScoreRecord(
            tile_id=meta["image_ids"][i],
            per_head_scores=[float(mean_scores[i])],
            mean_score=float(mean_scores[i]),
            label_true="positive" if feats["labels"][i] else "negative",
        )
        for i in range(mean_scores.size)
    ]
    alpha = calibrate_alpha(records, mode=cl["alpha_mode"])
    min_pos = min(r.mean_score for r in records if r.label_true == "positive")

    # model-level threshold from the seen pools evaluated on validation tiles
    pools = _load_pools(paths)
    cache = _CheckpointCache(paths)
    scorer = _scorer(paths, cfg, cache)
    ids = _split_ids(paths)
    af_val, _ = _load_stacks(paths, ids["val"])
    sbar_rows = []
    sbars = {"good": [], "poor_early": []}
    for label in ("good", "poor_early"):
        for ckpt_id in sorted(pools["pools"]["seen"][label]):
            _, mean_scores, _, _ = scorer.score_model_images(cache.get(ckpt_id), af_val)
            sbar = float(mean_scores.mean())
            sbars[label].append(sbar)
            sbar_rows.append({"model_id": ckpt_id, "quality_label": label, "mean_score": sbar})
    beta, lda_params = calibrate_beta(sbars["good"], sbars["poor_early"])
    result = CalibrationResult(
        alpha=alpha,
        beta=beta,
        val_positive_min_score=min_pos,
        lda_params=lda_params,
        provenance={
            "alpha_mode": cl["alpha_mode"],
            "val_records": len(records),
            "beta_models": {k: len(v) for k, v in sbars.items()},
            "deployment": pools["deployment"],
        },
    ).validate()
    paths.calibration.parent.mkdir(parents=True, exist_ok=True)
    result.save(paths.calibration)
    write_csv(
        paths.calibration.parent / "model_sbars.csv",
        ["model_id", "quality_label", "mean_score"],
        sbar_rows,
    )
    sens = confusion([r.mean_score for r in records],
                     [1 if r.label_true == "positive" else 0 for r in records],
                     alpha).sensitivity
    _log(paths, "calibrate", f"alpha={alpha:.6f} beta={beta:.6f} val sensitivity={sens}")


def stage_score_test(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "train-classifier", "calibrate")
    cl = cfg["classifier"]
    pools = _load_pools(paths)
    cache = _CheckpointCache(paths)
    scorer = _scorer(paths, cfg, cache)
    calib = CalibrationResult.load(paths.calibration)
    ids = _split_ids(paths)
    store = _store(paths)

    test_ids = ids["test"]
    assignments = _assign_sources(cfg, pools, test_ids, "test")
    records = []
    metric_rows = []
    drift_rows = []
    feats_all = []
    labels_all = []
    chunk = 50
    for start in range(0, len(test_ids), chunk):
        part = test_ids[start : start + chunk]
        af_stack, he_true = _load_stacks(paths, part)
        asg = assignments[start : start + chunk]
        for kind, key in (("neg", "good"), ("pos", "poor")):
            images = _generate_images(cache, [a[key] for a in asg], af_stack)
            per_head, mean, _, drift, feats = scorer.score_arrays(images, return_features=True)
            feats_all.append(feats)
            labels_all.extend([0 if kind == "neg" else 1] * len(part))
            for i, tile_id in enumerate(part):
                label = "negative" if kind == "neg" else "positive"
                records.append(
                    ScoreRecord(
                        tile_id=f"{tile_id}#{kind}",
                        per_head_scores=[float(s) for s in per_head[i]],
                        mean_score=float(per_head[i].mean()),
                        label_true=label,
                        source_ckpt_id=asg[i][key],
                        vs_ckpt_id=scorer.vs.ckpt_id,
                        vaf_ckpt_id=scorer.vaf.ckpt_id,
                        num_cycles=cl["num_cycles"],
                        num_heads=cl["num_heads"],
                    )
                )
                metric_rows.append(
                    {
                        "tile_id": f"{tile_id}#{kind}",
                        "label_true": label,
                        "source_ckpt_id": asg[i][key],
                        "mse": mse(images[i], he_true[i]),
                        "pcc": pcc(images[i], he_true[i]),
                        "psnr_db": psnr(images[i], he_true[i]),
                        "confidence_score": float(per_head[i].mean()),
                    }
                )
                drift_rows.append(
                    {
                        "tile_id": f"{tile_id}#{kind}",
                        "label_true": label,
                        "mean_drift": float(drift[i].mean()),
                        "final_drift": float(drift[i][-1]) if drift.shape[1] else 0.0,
                    }
                )
    paths.scores.mkdir(parents=True, exist_ok=True)
    write_csv(paths.scores / "test_scores.csv", _score_fieldnames(cl["num_heads"]),
              _records_to_rows(records))
    write_csv(
        paths.scores / "metric_table.csv",
        ["tile_id", "label_true", "source_ckpt_id", "mse", "pcc", "psnr_db", "confidence_score"],
        metric_rows,
    )
    write_csv(paths.scores / "drift.csv", ["tile_id", "label_true", "mean_drift", "final_drift"],
              drift_rows)
    save_arrays(
        paths.scores / "features_test.arr",
        {
            "features": np.concatenate(feats_all).astype(np.float32),
            "labels": np.asarray(labels_all, dtype=np.int64),
        },
        meta={"image_ids": [r.tile_id for r in records]},
    )

    labels01 = np.array([1 if r.label_true == "positive" else 0 for r in records])
    scores = np.array([r.mean_score for r in records])
    sep_rows = [confusion(scores, labels01, calib.alpha, metric_name="confidence_score").as_dict()]
    values = {name: np.array([row[name] for row in metric_rows]) for name in ("mse", "pcc", "psnr_db")}
    for name, vals in values.items():
        pos, neg = vals[labels01 == 1], vals[labels01 == 0]
        sep_rows.append(
            {
                "metric_name": name,
                "abs_t": welch_t(pos, neg),
                "kl_divergence": kl_divergence(pos, neg),
            }
        )
    write_csv(
        paths.scores / "separation.csv",
        ["metric_name", "abs_t", "kl_divergence", "threshold", "accuracy", "sensitivity",
         "specificity", "true_pos", "false_pos", "true_neg", "false_neg"],
        sep_rows,
    )
    head = sep_rows[0]
    _log(
        paths,
        "score-test",
        f"test accuracy={head['accuracy']:.4f} sensitivity={head['sensitivity']:.4f} "
        f"|t|={head['abs_t']:.2f} kl={head['kl_divergence']:.3f}",
    )


def _study_models(cfg: dict, pools: dict) -> list:
    count = cfg["study"]["num_models"] // 2
    picks = []
    for label, key in (("good", "good"), ("poor", "poor_early")):
        pool = sorted(pools["pools"]["unseen"][key])
        rng = substream(cfg["master_seed"], "study-models", label)
        idx = rng.choice(len(pool), size=count, replace=False)
        picks.extend((pool[i], label) for i in sorted(idx))
    return picks


def stage_maqua_study(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "calibrate")
    st = cfg["study"]
    pools = _load_pools(paths)
    cache = _CheckpointCache(paths)
    scorer = _scorer(paths, cfg, cache)
    calib = CalibrationResult.load(paths.calibration)
    ids = _split_ids(paths)
    rng = substream(cfg["master_seed"], "study-tiles")
    idx = np.sort(rng.choice(len(ids["test"]), size=st["pool_tiles"], replace=False))
    pool_ids = [ids["test"][i] for i in idx]
    af_pool, _ = _load_stacks(paths, pool_ids)
    models = [(m, cache.get(m), label) for m, label in _study_models(cfg, pools)]
    study = resampling_study(
        models,
        af_pool,
        pool_ids,
        scorer,
        calib.beta,
        sample_grid=st["sample_grid"],
        repeats=st["repeats"],
        seed=cfg["master_seed"],
    )
    paths.study.mkdir(parents=True, exist_ok=True)
    write_csv(
        paths.study / "study_long.csv",
        ["model_id", "quality_label", "sample_size", "repetition", "mean_score", "verdict"],
        study["long"],
    )
    write_csv(
        paths.study / "study_summary.csv",
        ["model_id", "quality_label", "sample_size", "mean_sbar", "std_sbar", "reject_rate"],
        study["summary"],
    )
    write_csv(
        paths.study / "study_by_n.csv",
        ["sample_size", "accuracy", "kl_divergence"],
        study["by_n"],
    )
    with open(paths.study / "study.json", "w", encoding="utf-8") as fh:
        json.dump(
            {k: study[k] for k in ("pool_size", "beta", "repeats", "models", "by_n")},
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    _log(paths, "maqua-study", f"by_n: {study['by_n']}")


def stage_external_gen(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "calibrate")
    ex = cfg["external"]
    pools = _load_pools(paths)
    cache = _CheckpointCache(paths)

    # contamination guard: the classifier must never have trained on
    # overfit-model images
    with open(paths.classifier / "assignments.json", "r", encoding="utf-8") as fh:
        assignments = json.load(fh)
    overfit_ids = set(pools["pools"]["overfit"])
    used = {a[k] for split in assignments.values() for a in split for k in ("good", "poor")}
    if used & overfit_ids:
        raise StageConfigError(
            "external generalization aborted: classifier training images came from "
            f"overfit checkpoints: {sorted(used & overfit_ids)}"
        )

    scorer = _scorer(paths, cfg, cache)
    calib = CalibrationResult.load(paths.calibration)
    ids = _split_ids(paths)
    count = ex["models_per_class"]
    groups = []
    for label, pool in (
        ("good", sorted(pools["pools"]["unseen"]["good"])),
        ("poor_early", sorted(pools["pools"]["unseen"]["poor_early"])),
        ("poor_overfit", sorted(pools["pools"]["overfit"])),
    ):
        rng = substream(cfg["master_seed"], "external-models", label)
        idx = rng.choice(len(pool), size=count, replace=False)
        groups.extend((pool[i], label) for i in sorted(idx))

    verdict_rows = []
    image_rows = []
    correct = 0
    overfit_flags = []
    for model_id, label in groups:
        rng = substream(cfg["master_seed"], "external-tiles", model_id)
        idx = np.sort(rng.choice(len(ids["test"]), size=ex["tiles_per_model"], replace=False))
        tile_ids = [ids["test"][i] for i in idx]
        af_stack, _ = _load_stacks(paths, tile_ids)
        _, mean_scores, _, _ = scorer.score_model_images(cache.get(model_id), af_stack)
        pick = substream(cfg["master_seed"], "external-verdict", model_id)
        sub = np.sort(pick.choice(len(tile_ids), size=ex["verdict_sample_size"], replace=False))
        sbar = float(mean_scores[sub].mean())
        verdict = "reject_model" if sbar >= calib.beta else "accept_model"
        expected = "accept_model" if label == "good" else "reject_model"
        correct += int(verdict == expected)
        verdict_rows.append(
            {
                "model_id": model_id,
                "quality_label": label,
                "sample_size": ex["verdict_sample_size"],
                "mean_score": sbar,
                "verdict": verdict,
                "correct": verdict == expected,
            }
        )
        for tid, s in zip(tile_ids, mean_scores):
            rejected = bool(s >= calib.alpha)
            image_rows.append(
                {
                    "model_id": model_id,
                    "quality_label": label,
                    "tile_id": tid,
                    "confidence_score": float(s),
                    "rejected": rejected,
                }
            )
            if label == "poor_overfit":
                overfit_flags.append(rejected)

    summary = {
        "models_per_class": count,
        "model_accuracy": correct / len(groups),
        "overfit_image_rejection_rate": float(np.mean(overfit_flags)),
        "alpha": calib.alpha,
        "beta": calib.beta,
    }
    paths.external.mkdir(parents=True, exist_ok=True)
    write_csv(
        paths.external / "verdicts.csv",
        ["model_id", "quality_label", "sample_size", "mean_score", "verdict", "correct"],
        verdict_rows,
    )
    write_csv(
        paths.external / "image_rejection.csv",
        ["model_id", "quality_label", "tile_id", "confidence_score", "rejected"],
        image_rows,
    )
    with open(paths.external / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _log(paths, "external-gen", json.dumps(summary, sort_keys=True))


def _eval_heads_on(feats, labels, heads, alpha):
    per_head, mean = score_features(feats, heads)
    rep = confusion(mean, labels, alpha)
    return mean, rep


def stage_ablate_cycles(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "train-classifier", "calibrate", "score-test")
    cl = cfg["classifier"]
    train = load_arrays(paths.classifier / "features_train.arr")[0]
    val = load_arrays(paths.classifier / "features_val.arr")[0]
    test = load_arrays(paths.scores / "features_test.arr")[0]
    rows = []
    for t in cfg["ablation"]["cycle_values"]:
        heads = train_heads(
            train["features"][:, :t],
            train["labels"],
            num_heads=cl["num_heads"],
            seed=cl["seed"],
            epochs=cl["head_epochs"],
            lr=cl["head_lr"],
            label_smoothing=cl["label_smoothing"],
            threads=cfg["torch_threads"],
        )
        _, val_mean = score_features(val["features"][:, :t], heads)
        val_records = [
            ScoreRecord(tile_id=str(i), per_head_scores=[float(val_mean[i])],
                        mean_score=float(val_mean[i]),
                        label_true="positive" if val["labels"][i] else "negative")
            for i in range(val_mean.size)
        ]
        alpha_t = calibrate_alpha(val_records, mode=cl["alpha_mode"])
        test_mean, rep = _eval_heads_on(test["features"][:, :t], test["labels"], heads, alpha_t)
        rows.append(
            {
                "num_cycles": t,
                "alpha": alpha_t,
                "accuracy": rep.accuracy,
                "sensitivity": rep.sensitivity,
                "specificity": rep.specificity,
                "abs_t": rep.abs_t,
                "kl_divergence": rep.kl_divergence,
            }
        )
    paths.ablations.mkdir(parents=True, exist_ok=True)
    write_csv(
        paths.ablations / "cycles.csv",
        ["num_cycles", "alpha", "accuracy", "sensitivity", "specificity", "abs_t", "kl_divergence"],
        rows,
    )
    _log(paths, "ablate-T", json.dumps(rows))


def stage_ablate_heads(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "train-classifier", "calibrate", "score-test")
    cl = cfg["classifier"]
    ab = cfg["ablation"]
    train = load_arrays(paths.classifier / "features_train.arr")[0]
    val = load_arrays(paths.classifier / "features_val.arr")[0]
    test = load_arrays(paths.scores / "features_test.arr")[0]
    rows = []
    max_heads = max(ab["head_values"])
    for seed in ab["head_seeds"]:
        heads_all = train_heads(
            train["features"],
            train["labels"],
            num_heads=max_heads,
            seed=seed,
            epochs=cl["head_epochs"],
            lr=cl["head_lr"],
            label_smoothing=cl["label_smoothing"],
            threads=cfg["torch_threads"],
        )
        for c in ab["head_values"]:
            heads = heads_all[:c]
            _, val_mean = score_features(val["features"], heads)
            val_records = [
                ScoreRecord(tile_id=str(i), per_head_scores=[float(val_mean[i])],
                            mean_score=float(val_mean[i]),
                            label_true="positive" if val["labels"][i] else "negative")
                for i in range(val_mean.size)
            ]
            alpha_c = calibrate_alpha(val_records, mode=cl["alpha_mode"])
            _, rep = _eval_heads_on(test["features"], test["labels"], heads, alpha_c)
            rows.append(
                {
                    "head_seed": seed,
                    "num_heads": c,
                    "alpha": alpha_c,
                    "accuracy": rep.accuracy,
                    "sensitivity": rep.sensitivity,
                    "specificity": rep.specificity,
                }
            )
    paths.ablations.mkdir(parents=True, exist_ok=True)
    write_csv(
        paths.ablations / "heads.csv",
        ["head_seed", "num_heads", "alpha", "accuracy", "sensitivity", "specificity"],
        rows,
    )
    _log(paths, "ablate-C", json.dumps(rows))


def stage_hs_bench(paths: RunPaths, cfg: dict) -> None:
    require_stage(paths, cfg, "gen-data", "pool-checkpoints")
    hs = cfg["hs"]
    cl = cfg["classifier"]
    pools = _load_pools(paths)
    cache = _CheckpointCache(paths)
    ids = _split_ids(paths)
    total = hs["train_tiles"] + hs["val_tiles"] + hs["test_tiles"]
    chosen = ids["test"][-total:]
    roles = {
        "train": chosen[: hs["train_tiles"]],
        "val": chosen[hs["train_tiles"] : hs["train_tiles"] + hs["val_tiles"]],
        "test": chosen[hs["train_tiles"] + hs["val_tiles"] :],
    }
    bench = build_hs_benchmark(
        roles, modes=hs["modes"], severities=hs["severities"], eval_severity=hs["eval_severity"]
    )
    store = _store(paths)

    def load_he(tile_id):
        return store.load_pair(tile_id)[1]

    vs = cache.get(pools["deployment"]["vs"])
    vaf = cache.get(pools["deployment"]["vaf"])

    from .cycle import run_cycles_stack

    def cycled(images):
        chunks = []
        for start in range(0, images.shape[0], 50):
            chunks.append(run_cycles_stack(images[start : start + 50], vs, vaf, cl["num_cycles"]))
        return np.concatenate(chunks)

    train_stack, train_ids, train_labels, _ = materialize(bench, "train", load_he)
    frames = cycled(train_stack)
    del train_stack
    clean_frames = frames[train_labels == 0].reshape(-1, *frames.shape[2:])
    backbone_hs, history = pretrain_backbone(
        clean_frames,
        feature_dim=cl["feature_dim"],
        epochs=hs["backbone_epochs"],
        lr=cl["backbone_lr"],
        batch_size=cl["backbone_batch"],
        seed=cl["seed"],
        threads=cfg["torch_threads"],
    )
    del clean_frames
    feats = backbone_hs.encode_sequences(frames)
    del frames
    heads_hs = train_heads(
        feats,
        train_labels,
        num_heads=cl["num_heads"],
        seed=cl["seed"],
        epochs=cl["head_epochs"],
        lr=cl["head_lr"],
        label_smoothing=cl["label_smoothing"],
        threads=cfg["torch_threads"],
    )
    scorer_hs = StainedImageScorer(
        vs=vs, vaf=vaf, backbone=backbone_hs, heads=heads_hs,
        num_cycles=cl["num_cycles"], combine=cl["combine"],
    )
    val_stack, val_ids, val_labels, _ = materialize(bench, "val", load_he)
    _, val_mean, _, _ = scorer_hs.score_arrays(val_stack)
    del val_stack
    val_records = [
        ScoreRecord(tile_id=val_ids[i], per_head_scores=[float(val_mean[i])],
                    mean_score=float(val_mean[i]),
                    label_true="positive" if val_labels[i] else "negative")
        for i in range(val_mean.size)
    ]
    alpha_hs = calibrate_alpha(val_records, mode=cl["alpha_mode"])

    result = run_hs_assessment(bench, load_he, scorer_hs, alpha_hs)
    paths.hs.mkdir(parents=True, exist_ok=True)
    backbone_hs.save(paths.hs / "backbone_hs.arr")
    save_heads(heads_hs, paths.hs / "heads_hs.arr")
    write_csv(paths.hs / "backbone_history.csv", ["epoch", "recon_loss"], history)
    with open(paths.hs / "benchmark.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "clean": bench.clean,
                "corrupted": bench.corrupted,
                "modes": bench.modes,
                "severities": bench.severities,
                "eval_severity": bench.eval_severity,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    write_csv(
        paths.hs / "hs_scores.csv",
        ["tile_id", "label_true", "mode", "severity", "confidence_score",
         "nuclei_count", "nuclei_area"],
        result["rows"],
    )
    write_csv(
        paths.hs / "hs_rejection.csv",
        ["mode", "severity", "rejection_rate", "n"],
        result["rejection_rows"],
    )
    summary = {
        "alpha_hs": alpha_hs,
        "auc_score": result["auc_score"],
        "auc_baselines": result["auc_baselines"],
        "report": result["report"].as_dict(),
    }
    with open(paths.hs / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _log(paths, "hs-bench", json.dumps({k: summary[k] for k in ("alpha_hs", "auc_score", "auc_baselines")}))


def stage_report(paths: RunPaths, cfg: dict) -> None:
    require_stage(
        paths, cfg, "score-test", "maqua-study", "ablate-T", "ablate-C", "external-gen", "hs-bench"
    )
    from .report import build_report

    build_report(paths, cfg)
    _log(paths, "report", "report written")


STAGES = {
    "gen-data": stage_gen_data,
    "train-translators": stage_train_translators,
    "pool-checkpoints": stage_pool_checkpoints,
    "train-classifier": stage_train_classifier,
    "calibrate": stage_calibrate,
    "score-test": stage_score_test,
    "maqua-study": stage_maqua_study,
    "ablate-T": stage_ablate_cycles,
    "ablate-C": stage_ablate_heads,
    "external-gen": stage_external_gen,
    "hs-bench": stage_hs_bench,
    "report": stage_report,
}

STAGE_ORDER = list(STAGES)


def run_stage(paths: RunPaths, cfg: dict, stage: str, force: bool = False) -> float:
    """Run one stage with marker bookkeeping; returns its duration."""
    if stage not in STAGES:
        raise StageConfigError(f"unknown stage {stage!r}")
    paths.root.mkdir(parents=True, exist_ok=True)
    if not paths.config.exists() or force:
        config_mod.dump(cfg, paths.config)
    t0 = time.monotonic()
    if stage == "gen-data":
        STAGES[stage](paths, cfg, force=force)
    else:
        STAGES[stage](paths, cfg)
    duration = time.monotonic() - t0
    _mark_stage(paths, stage, cfg, duration)
    return duration
