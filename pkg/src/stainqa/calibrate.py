"""Threshold calibration and model-level acceptance.

Two thresholds exist. The image-level threshold ``alpha`` is the largest
value that still rejects every positive in the validation set (100%
validation sensitivity under the "score >= alpha rejects" rule). The
model-level threshold ``beta`` is the 1-D linear-discriminant boundary
between the per-model mean-score distributions of good and poor models:
one Gaussian is fitted per class (equal priors) and ``beta`` is the point
between the class means where the two densities are equal.

Model-level acceptance averages the confidence scores of N sampled images
from the model under test and rejects the model when that average reaches
``beta``. The resampling study repeats this R times per model and sample
size to measure how the verdicts concentrate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .metrics import kl_divergence
from .seeding import substream


class CalibrationError(ValueError):
    pass


def gaussian_pdf(x, mu: float, sigma: float):
    x = np.asarray(x, dtype=np.float64)
    z = (x - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * np.pi))


def calibrate_alpha(val_records: list, mode: str = "min_positive") -> float:
    """Image-level threshold from labelled validation score records.

    ``min_positive`` (default) returns the smallest positive mean score,
    the largest threshold with 100% validation sensitivity. ``midpoint``
    backs off to halfway between that score and the nearest lower negative.
    """
    positives = [r.mean_score for r in val_records if r.label_true == "positive"]
    negatives = [r.mean_score for r in val_records if r.label_true == "negative"]
    if not positives:
        raise CalibrationError("alpha calibration needs at least one positive validation record")
    min_pos = float(min(positives))
    if mode == "min_positive":
        return min_pos
    if mode == "midpoint":
        lower = [s for s in negatives if s < min_pos]
        floor = max(lower) if lower else 0.0
        return 0.5 * (floor + min_pos)
    raise CalibrationError(f"unknown alpha mode {mode!r}")


def calibrate_beta(good_sbars, poor_sbars) -> tuple[float, dict]:
    """Model-level threshold: equal-density crossing of two fitted Gaussians.

    Fits one Gaussian per class from sample means and ddof=1 standard
    deviations (equal priors). With equal deviations the crossing is the
    midpoint of the means; otherwise the quadratic equal-density equation
    is solved and the root between the class means is chosen (the other
    root sits in a far tail and is not a class boundary). Returns
    ``(beta, lda_params)``.
    """
    good = np.asarray(good_sbars, dtype=np.float64).ravel()
    poor = np.asarray(poor_sbars, dtype=np.float64).ravel()
    if good.size < 2 or poor.size < 2:
        raise CalibrationError("beta calibration needs at least two mean scores per class")
    mu_g, mu_p = float(good.mean()), float(poor.mean())
    # a class whose scores all tie (saturated classifier) still defines a
    # boundary; floor the deviation so the crossing stays computable
    sigma_g = max(float(good.std(ddof=1)), 1e-9)
    sigma_p = max(float(poor.std(ddof=1)), 1e-9)
    if mu_g == mu_p:
        raise CalibrationError("class means are identical; no discriminant exists")
    params = {
        "mu_good": mu_g,
        "mu_poor": mu_p,
        "sigma_good": sigma_g,
        "sigma_poor": sigma_p,
        "prior_good": 0.5,
        "prior_poor": 0.5,
    }
    lo, hi = min(mu_g, mu_p), max(mu_g, mu_p)
    if abs(sigma_g - sigma_p) < 1e-12:
        return 0.5 * (mu_g + mu_p), params
    a = 1.0 / (2.0 * sigma_p**2) - 1.0 / (2.0 * sigma_g**2)
    b = mu_g / sigma_g**2 - mu_p / sigma_p**2
    c = mu_p**2 / (2.0 * sigma_p**2) - mu_g**2 / (2.0 * sigma_g**2) - np.log(sigma_g / sigma_p)
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        raise CalibrationError("equal-density equation has no real solution")
    roots = np.array([(-b + np.sqrt(disc)) / (2.0 * a), (-b - np.sqrt(disc)) / (2.0 * a)])
    mid = 0.5 * (lo + hi)
    inside = roots[(roots > lo) & (roots < hi)]
    if inside.size:
        beta = float(inside[np.argmin(np.abs(inside - mid))])
    else:
        # extreme variance ratios put both crossings outside the means;
        # fall back to the crossing nearest the midpoint
        beta = float(roots[np.argmin(np.abs(roots - mid))])
    return beta, params


@dataclass
class CalibrationResult:
    alpha: float
    beta: float
    val_positive_min_score: float
    lda_params: dict
    provenance: dict = field(default_factory=dict)

    def validate(self) -> "CalibrationResult":
        if self.alpha > self.val_positive_min_score:
            raise CalibrationError("alpha must not exceed the lowest positive validation score")
        return self

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)


@dataclass
class ModelVerdict:
    model_id: str
    sample_size: int
    mean_score: float  # average confidence score over the sampled images
    verdict: str  # accept_model | reject_model
    sample_tile_ids: list

    def __post_init__(self):
        if self.verdict not in ("accept_model", "reject_model"):
            raise CalibrationError(f"bad verdict {self.verdict!r}")


def assess_model(
    model,
    af_stack: np.ndarray,
    tile_ids: list,
    scorer,
    beta: float,
    sample_size: int,
    seed: int = 0,
    stream: tuple = ("assess-model",),
) -> ModelVerdict:
    """Sample tiles, stain them with the model under test, score, average.

    The cycle pair and classifier come from ``scorer``; the model under
    test only generates the images. Rejects the model iff the average
    confidence score reaches ``beta``.
    """
    if sample_size < 1:
        raise CalibrationError("sample_size must be >= 1")
    if af_stack.shape[0] < sample_size:
        raise CalibrationError(
            f"tile pool ({af_stack.shape[0]}) smaller than sample size ({sample_size})"
        )
    rng = substream(seed, *stream)
    idx = np.sort(rng.choice(af_stack.shape[0], size=sample_size, replace=False))
    _, mean_scores, _, _ = scorer.score_model_images(model, af_stack[idx])
    sbar = float(mean_scores.mean())
    return ModelVerdict(
        model_id=getattr(model, "ckpt_id", "") or "model",
        sample_size=sample_size,
        mean_score=sbar,
        verdict="reject_model" if sbar >= beta else "accept_model",
        sample_tile_ids=[tile_ids[i] for i in idx],
    )


def resampling_study(
    models: list,
    af_stack: np.ndarray,
    tile_ids: list,
    scorer,
    beta: float,
    sample_grid: list,
    repeats: int,
    seed: int = 0,
) -> dict:
    """Repeated model-level assessment over a grid of sample sizes.

    ``models`` is a list of (model_id, checkpoint, quality_label). Every
    model's images over the whole tile pool are scored once; each of the
    ``repeats`` repetitions then draws ``n`` of those scores without
    replacement. Reports per-(model, n) mean/std of the average score,
    per-n model-classification accuracy, and the divergence between the
    poor and good average-score populations.
    """
    if repeats < 1:
        raise CalibrationError("repeats must be >= 1")
    pool = af_stack.shape[0]
    if pool < max(sample_grid):
        raise CalibrationError("tile pool smaller than the largest sample size")
    per_model_scores = {}
    for model_id, ckpt, label in models:
        _, mean_scores, _, _ = scorer.score_model_images(ckpt, af_stack)
        per_model_scores[model_id] = mean_scores

    long_rows = []
    summary_rows = []
    by_n = []
    for n in sample_grid:
        sbars_good, sbars_poor = [], []
        correct = 0
        total = 0
        for model_id, ckpt, label in models:
            scores = per_model_scores[model_id]
            sbars = []
            for rep in range(repeats):
                rng = substream(seed, "model-study", model_id, n, rep)
                idx = rng.choice(pool, size=n, replace=False)
                sbar = float(scores[idx].mean())
                verdict = "reject_model" if sbar >= beta else "accept_model"
                expected = "accept_model" if label == "good" else "reject_model"
                correct += int(verdict == expected)
                total += 1
                sbars.append(sbar)
                long_rows.append(
                    {
                        "model_id": model_id,
                        "quality_label": label,
                        "sample_size": n,
                        "repetition": rep,
                        "mean_score": sbar,
                        "verdict": verdict,
                    }
                )
            sbars = np.asarray(sbars)
            (sbars_good if label == "good" else sbars_poor).extend(sbars.tolist())
            summary_rows.append(
                {
                    "model_id": model_id,
                    "quality_label": label,
                    "sample_size": n,
                    "mean_sbar": float(sbars.mean()),
                    "std_sbar": float(sbars.std(ddof=1)) if repeats > 1 else None,
                    "reject_rate": float(np.mean(sbars >= beta)),
                }
            )
        entry = {"sample_size": n, "accuracy": correct / total}
        if sbars_good and sbars_poor:
            entry["kl_divergence"] = kl_divergence(sbars_poor, sbars_good)
        by_n.append(entry)
    return {
        "pool_size": pool,
        "beta": beta,
        "repeats": repeats,
        "models": [{"model_id": m, "quality_label": l} for m, _, l in models],
        "long": long_rows,
        "summary": summary_rows,
        "by_n": by_n,
    }
