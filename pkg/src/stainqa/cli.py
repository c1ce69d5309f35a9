"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing/stale dependency,
4 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .calibrate import CalibrationError, CalibrationResult, assess_model
from .ensemble import EnsembleError
from .hsbench import HsBenchmarkError
from .metrics import MetricError
from .patches import Patch, PatchError
from .pipeline import (
    RunPaths,
    STAGE_ORDER,
    StageConfigError,
    StageDependencyError,
    StageError,
    _CheckpointCache,
    _load_pools,
    _scorer,
    _split_ids,
    _store,
    run_stage,
)
from .synth import GeneratorError
from .translate import DivergenceError, TranslatorError

_CONFIG_ERRORS = (
    config_mod.ConfigError,
    StageConfigError,
    GeneratorError,
    TranslatorError,
    CalibrationError,
    EnsembleError,
    HsBenchmarkError,
    MetricError,
    PatchError,
)


def _common_parser() -> argparse.ArgumentParser:
    # shared flags accepted before or after the subcommand; SUPPRESS keeps
    # the post-subcommand copy from clobbering a pre-subcommand value
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file overriding defaults")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help=f"run directory (or ${config_mod.ENV_OUT_ROOT})")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument(
        "--print-config",
        action="store_true",
        help="print the resolved config as JSON and exit",
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="stainqa",
        description="Ground-truth-free quality assessment of virtual staining, "
        "on a synthetic benchmark.",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command")
    for stage in STAGE_ORDER:
        sub.add_parser(stage, help=f"run the {stage} stage", parents=[common])
    run_all = sub.add_parser("run-all", help="run every stage in order", parents=[common])
    run_all.add_argument("--stage", help="run only this stage")
    assess_img = sub.add_parser("assess-image", help="score one stained image",
                                parents=[common])
    assess_img.add_argument("--tile", help="test-split tile id to stain and assess")
    assess_img.add_argument("--model", help="checkpoint id generating the image "
                            "(default: deployment forward model)")
    assess_img.add_argument("--image", help="path to a stained image (.png or .arr) "
                            "to assess directly")
    assess_mod = sub.add_parser("assess-model", help="accept or reject one model",
                                parents=[common])
    assess_mod.add_argument("--model", required=True, help="checkpoint id under test")
    assess_mod.add_argument("--n", type=int, help="images to sample (default from config)")
    return parser


def _resolve_config(args) -> dict:
    config_path = getattr(args, "config", None)
    seed = getattr(args, "seed", None)
    if config_path:
        return config_mod.load(config_path, master_seed=seed)
    return config_mod.resolve(master_seed=seed)


def _load_stained_image(path: Path) -> np.ndarray:
    if path.suffix == ".arr":
        from .arrayio import load_arrays

        arrays, _ = load_arrays(path)
        key = "he" if "he" in arrays else next(iter(arrays))
        return np.asarray(arrays[key], dtype=np.float32)
    from PIL import Image

    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def _cmd_assess_image(args, cfg, paths) -> int:
    from .pipeline import require_stage

    require_stage(paths, cfg, "calibrate")
    cache = _CheckpointCache(paths)
    scorer = _scorer(paths, cfg, cache)
    calib = CalibrationResult.load(paths.calibration)
    if args.image:
        pixels = _load_stained_image(Path(args.image))
        image_id = Path(args.image).name
    elif args.tile:
        store = _store(paths)
        af, _ = store.load_pair(args.tile)
        pools = _load_pools(paths)
        model_id = args.model or pools["deployment"]["vs"]
        model = cache.get(model_id)
        pixels = model.apply(af).pixels
        image_id = f"{args.tile}@{model_id}"
    else:
        raise StageConfigError("assess-image needs --tile or --image")
    _, mean, _, _ = scorer.score_arrays(pixels[None])
    score = float(mean[0])
    verdict = "reject" if score >= calib.alpha else "accept"
    print(f"image={image_id} score={score:.6f} alpha={calib.alpha:.6f} verdict={verdict}")
    return 0


def _cmd_assess_model(args, cfg, paths) -> int:
    from .pipeline import require_stage

    require_stage(paths, cfg, "calibrate")
    cache = _CheckpointCache(paths)
    scorer = _scorer(paths, cfg, cache)
    calib = CalibrationResult.load(paths.calibration)
    ids = _split_ids(paths)
    from .pipeline import _load_stacks

    af_stack, _ = _load_stacks(paths, ids["test"])
    n = args.n or cfg["external"]["verdict_sample_size"]
    verdict = assess_model(
        cache.get(args.model),
        af_stack,
        ids["test"],
        scorer,
        calib.beta,
        sample_size=n,
        seed=cfg["master_seed"],
        stream=("assess-model-cli", args.model),
    )
    print(
        f"model={args.model} n={verdict.sample_size} mean_score={verdict.mean_score:.6f} "
        f"beta={calib.beta:.6f} verdict={verdict.verdict}"
    )
    return 0


def _dispatch(args) -> int:
    cfg = _resolve_config(args)
    if getattr(args, "print_config", False):
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    if not args.command:
        raise config_mod.ConfigError("no command given (try `stainqa run-all` or --help)")
    paths = RunPaths(config_mod.output_root(getattr(args, "out", None)))
    force = getattr(args, "force", False)
    if args.command == "assess-image":
        return _cmd_assess_image(args, cfg, paths)
    if args.command == "assess-model":
        return _cmd_assess_model(args, cfg, paths)
    if args.command == "run-all":
        stages = [args.stage] if args.stage else STAGE_ORDER
        for stage in stages:
            duration = run_stage(paths, cfg, stage, force=force)
            print(f"[{stage}] done in {duration:.1f}s")
        return 0
    duration = run_stage(paths, cfg, args.command, force=force)
    print(f"[{args.command}] done in {duration:.1f}s")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 4
    except StageDependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
