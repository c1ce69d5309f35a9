"""Deployment scorer: stained image in, confidence score out.

Bundles the fixed cycle pair (one good forward and one good backward
translator), the frozen backbone and the voting heads. The same bundle
serves image-level assessment, model-level assessment and the stained-slide
benchmark; only the inputs change.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cycle import run_cycles_stack
from .ensemble import Backbone, ScoreRecord, majority_fraction, score_features
from .patches import check_stack


@dataclass
class StainedImageScorer:
    vs: object  # af -> he checkpoint used for cycling
    vaf: object  # he -> af checkpoint used for cycling
    backbone: Backbone
    heads: list
    num_cycles: int
    combine: str = "mean"

    def score_arrays(self, he_stack: np.ndarray, return_features: bool = False):
        """Score a stack of stained tiles.

        Returns (per_head (N,C), mean (N,), ensemble (N,), drift (N,T-1));
        drift is the mean absolute distance of each cycled frame to frame 0.
        With ``return_features`` the frame features (N,T,F) are appended.
        """
        he_stack = check_stack(he_stack, "he")
        frames = run_cycles_stack(he_stack, self.vs, self.vaf, self.num_cycles)
        feats = self.backbone.encode_sequences(frames)
        per_head, mean = score_features(feats, self.heads)
        ensemble = majority_fraction(per_head) if self.combine == "majority" else mean
        base = frames[:, :1].astype(np.float64)
        if self.num_cycles > 1:
            drift = np.abs(frames[:, 1:].astype(np.float64) - base).mean(axis=(2, 3, 4))
        else:
            drift = np.zeros((he_stack.shape[0], 0))
        if return_features:
            return per_head, mean, ensemble, drift, feats
        return per_head, mean, ensemble, drift

    def records(self, he_stack, tile_ids, labels=None, source_ids=None) -> list:
        """ScoreRecords for a stack of stained tiles."""
        per_head, mean, _, _ = self.score_arrays(he_stack)
        n = he_stack.shape[0]
        labels = labels if labels is not None else [""] * n
        source_ids = source_ids if source_ids is not None else [""] * n
        return [
            ScoreRecord(
                tile_id=tile_ids[i],
                per_head_scores=[float(s) for s in per_head[i]],
                mean_score=float(per_head[i].mean()),
                label_true=labels[i],
                source_ckpt_id=source_ids[i],
                vs_ckpt_id=getattr(self.vs, "ckpt_id", ""),
                vaf_ckpt_id=getattr(self.vaf, "ckpt_id", ""),
                num_cycles=self.num_cycles,
                num_heads=len(self.heads),
            )
            for i in range(n)
        ]

    def score_model_images(self, model, af_stack: np.ndarray):
        """Generate stained images with ``model`` and score them."""
        he = model.apply_stack(check_stack(af_stack, "af"))
        return self.score_arrays(he)
