"""Iterated forward/backward translation of a stained tile.

Starting from the stained image under test, each cycle maps it back to the
autofluorescence domain and forward again. Frame 0 is always the untouched
input, so a sequence of length T holds the original plus T-1 cycled
versions; defects that put an image off the translators' training manifold
accumulate over cycles, which is the signal the classifier consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arrayio import load_arrays, save_arrays
from .patches import Patch, PatchError, check_stack


class CycleError(ValueError):
    pass


@dataclass
class CycleSeq:
    """Ordered stained-image frames produced by cycling one input."""

    frames: np.ndarray  # T x H x W x 3, float32 in [0, 1]
    source_tile_id: str = ""
    vs_ckpt_id: str = ""
    vaf_ckpt_id: str = ""

    def __post_init__(self):
        self.frames = check_stack(self.frames, "he")

    @property
    def num_cycles(self) -> int:
        return int(self.frames.shape[0])


def _check_pair(vs, vaf) -> None:
    if getattr(vs, "input_domain", None) != "af" or getattr(vs, "output_domain", None) != "he":
        raise CycleError("vs checkpoint must map af -> he")
    if getattr(vaf, "input_domain", None) != "he" or getattr(vaf, "output_domain", None) != "af":
        raise CycleError("vaf checkpoint must map he -> af")


def run_cycles_stack(he_stack: np.ndarray, vs, vaf, num_cycles: int,
                     keep_af: bool = False):
    """Cycle a stack of stained tiles; returns frames (N, T, H, W, 3).

    With ``keep_af`` the intermediate autofluorescence frames
    (N, T-1, H, W, 1) are returned as well, for debugging.
    """
    if num_cycles < 1:
        raise CycleError("num_cycles must be >= 1")
    _check_pair(vs, vaf)
    he_stack = check_stack(he_stack, "he")
    frames = [he_stack]
    af_frames = []
    current = he_stack
    for _ in range(num_cycles - 1):
        af = vaf.apply_stack(current)
        current = vs.apply_stack(af)
        frames.append(current)
        if keep_af:
            af_frames.append(af)
    stacked = np.stack(frames, axis=1)
    if keep_af:
        return stacked, (np.stack(af_frames, axis=1) if af_frames else None)
    return stacked


def run_cycles(he: Patch, vs, vaf, num_cycles: int) -> CycleSeq:
    """Cycle one stained patch into a sequence of ``num_cycles`` frames."""
    if he.domain != "he":
        raise PatchError("run_cycles expects a stained (he) patch")
    frames = run_cycles_stack(he.pixels[None], vs, vaf, num_cycles)[0]
    return CycleSeq(
        frames=frames,
        source_tile_id=he.tile_id,
        vs_ckpt_id=getattr(vs, "ckpt_id", ""),
        vaf_ckpt_id=getattr(vaf, "ckpt_id", ""),
    )


def drift_profile(seq: CycleSeq) -> list:
    """Mean L1 distance of every cycled frame to frame 0 (length T-1)."""
    if seq.num_cycles < 2:
        raise CycleError("drift_profile needs at least 2 frames")
    base = seq.frames[0].astype(np.float64)
    return [float(np.mean(np.abs(f.astype(np.float64) - base))) for f in seq.frames[1:]]


def save_cycleseq(seq: CycleSeq, path) -> None:
    path = Path(path)
    meta = {
        "source_tile_id": seq.source_tile_id,
        "vs_ckpt_id": seq.vs_ckpt_id,
        "vaf_ckpt_id": seq.vaf_ckpt_id,
        "num_cycles": seq.num_cycles,
    }
    save_arrays(path, {"frames": seq.frames}, meta=meta)
    with open(path.with_suffix(path.suffix + ".json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cycleseq(path) -> CycleSeq:
    arrays, meta = load_arrays(path)
    return CycleSeq(
        frames=arrays["frames"],
        source_tile_id=meta.get("source_tile_id", ""),
        vs_ckpt_id=meta.get("vs_ckpt_id", ""),
        vaf_ckpt_id=meta.get("vaf_ckpt_id", ""),
    )
