"""Image comparison metrics, population separation statistics and the
hand-crafted nuclei baselines.

The supervised metrics (``mse``, ``pcc``, ``psnr``) compare a generated tile
against its ground-truth counterpart and are only computable because the
synthetic benchmark keeps perfect pairs around. The separation statistics
(``welch_t``, ``kl_divergence``) quantify how well a scalar score splits the
positive (hallucinated) and negative (acceptable) populations. The nuclei
metrics are the analytic quality-assurance baselines for stained tiles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# Nuclei are detected as "blue enough" pixels: B - (R+G)/2 above this
# threshold, tuned once against the generator's placement metadata.
BLUENESS_THRESHOLD = 0.08
MIN_COMPONENT_PX = 5

PSNR_CAP_DB = 100.0


class MetricError(ValueError):
    pass


def _as_same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    """Mean squared error between two equal-shape arrays.

    Parameters
    ----------
    a, b : array_like
        Pixel arrays (any shape, compared element-wise in float64).

    Returns
    -------
    float
        Mean of squared differences.
    """
    a, b = _as_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def pcc(a, b) -> float:
    """Pearson correlation coefficient over flattened pixels.

    Raises
    ------
    MetricError
        If shapes differ or either input has zero variance (the coefficient
        is undefined, reported as an error rather than NaN).
    """
    a, b = _as_same_shape(a, b)
    a = a.ravel()
    b = b.ravel()
    da = a - a.mean()
    db = b - b.mean()
    na = float(np.sqrt(np.sum(da * da)))
    nb = float(np.sqrt(np.sum(db * db)))
    if na == 0.0 or nb == 0.0:
        raise MetricError("pcc undefined for zero-variance input")
    r = float(np.sum(da * db) / (na * nb))
    return min(1.0, max(-1.0, r))


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical inputs.

    Defined as ``10 * log10(max_val**2 / mse)``; the cap avoids infinities in
    result tables when ``mse == 0``.
    """
    err = mse(a, b)
    if err == 0.0:
        return PSNR_CAP_DB
    value = 10.0 * np.log10(max_val * max_val / err)
    return float(min(value, PSNR_CAP_DB))


def welch_t(pos, neg) -> float:
    """Absolute Welch t-statistic between two samples.

    Uses unequal-variance form ``|mean_p - mean_n| / sqrt(s_p^2/n_p +
    s_n^2/n_n)`` with ddof=1 sample variances.

    Raises
    ------
    MetricError
        If either group has fewer than two values, or both variances vanish.
    """
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size < 2 or neg.size < 2:
        raise MetricError("welch_t needs at least two values per group")
    vp = float(np.var(pos, ddof=1))
    vn = float(np.var(neg, ddof=1))
    denom = vp / pos.size + vn / neg.size
    if denom == 0.0:
        raise MetricError("welch_t undefined: both groups have zero variance")
    return float(abs(pos.mean() - neg.mean()) / np.sqrt(denom))


def kl_divergence(pos, neg, bins: int = 20, eps: float = 1e-10) -> float:
    """KL(positive || negative) from shared-range histograms.

    Both samples are binned on the common [min, max] range with ``bins``
    equal-width bins; ``eps`` is added to every bin count before
    normalisation so the divergence is always finite.
    """
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise MetricError("kl_divergence needs nonempty groups")
    lo = min(pos.min(), neg.min())
    hi = max(pos.max(), neg.max())
    if hi == lo:
        hi = lo + 1.0  # all values identical; both histograms match anyway
    hp, _ = np.histogram(pos, bins=bins, range=(lo, hi))
    hn, _ = np.histogram(neg, bins=bins, range=(lo, hi))
    p = hp.astype(np.float64) + eps
    q = hn.astype(np.float64) + eps
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def auc(pos, neg) -> float:
    """Area under the ROC curve for ``score >= threshold -> positive``.

    Computed as the Mann-Whitney rank statistic: the probability that a
    random positive scores above a random negative, ties counted half.
    """
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise MetricError("auc needs nonempty groups")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="mergesort")
    ranks = np.empty(combined.size, dtype=np.float64)
    ranks[order] = np.arange(1, combined.size + 1)
    # average ranks over ties
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        if j > i:
            avg = 0.5 * (i + 1 + j + 1)
            ranks[order[i : j + 1]] = avg
        i = j + 1
    r_pos = ranks[: pos.size].sum()
    u = r_pos - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class SeparationReport:
    """Separation of positive vs negative populations for one metric."""

    metric_name: str
    abs_t: float
    kl_divergence: float
    threshold: float = float("nan")
    accuracy: float = float("nan")
    sensitivity: float = float("nan")
    specificity: float = float("nan")
    true_pos: int = 0
    false_pos: int = 0
    true_neg: int = 0
    false_neg: int = 0

    def as_dict(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "abs_t": self.abs_t,
            "kl_divergence": self.kl_divergence,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "true_pos": self.true_pos,
            "false_pos": self.false_pos,
            "true_neg": self.true_neg,
            "false_neg": self.false_neg,
        }


def confusion(scores, labels, threshold: float, metric_name: str = "confidence_score") -> SeparationReport:
    """Threshold scores (``score >= threshold`` rejects, i.e. predicts
    positive) and summarise against true labels.

    ``labels`` holds 1 for positive (hallucinated) and 0 for negative.
    Sensitivity is the fraction of positives rejected; specificity the
    fraction of negatives accepted.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.size != labels.size:
        raise MetricError("scores and labels must align")
    if scores.size == 0:
        raise MetricError("confusion needs at least one record")
    predicted_pos = scores >= threshold
    tp = int(np.sum(predicted_pos & (labels == 1)))
    fp = int(np.sum(predicted_pos & (labels == 0)))
    tn = int(np.sum(~predicted_pos & (labels == 0)))
    fn = int(np.sum(~predicted_pos & (labels == 1)))
    n_pos = tp + fn
    n_neg = tn + fp
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    if n_pos >= 2 and n_neg >= 2:
        try:
            abs_t = welch_t(pos_scores, neg_scores)
        except MetricError:
            # two constant groups: infinitely separated if the constants
            # differ, not separated at all otherwise
            abs_t = float("inf") if pos_scores[0] != neg_scores[0] else 0.0
    else:
        abs_t = float("nan")
    kl = kl_divergence(pos_scores, neg_scores) if (n_pos and n_neg) else float("nan")
    return SeparationReport(
        metric_name=metric_name,
        abs_t=abs_t,
        kl_divergence=kl,
        threshold=float(threshold),
        accuracy=(tp + tn) / scores.size,
        sensitivity=tp / n_pos if n_pos else float("nan"),
        specificity=tn / n_neg if n_neg else float("nan"),
        true_pos=tp,
        false_pos=fp,
        true_neg=tn,
        false_neg=fn,
    )


def nuclei_mask(pixels: np.ndarray) -> np.ndarray:
    """Boolean mask of nucleus-coloured pixels in an H&E tile."""
    arr = np.asarray(pixels, dtype=np.float64)
    blueness = arr[..., 2] - 0.5 * (arr[..., 0] + arr[..., 1])
    return blueness > BLUENESS_THRESHOLD


def count_nuclei(pixels: np.ndarray) -> tuple[float, float]:
    """Normalised nuclei count and mean nucleus area of an H&E tile.

    Pixels pass the blueness test ``B - (R+G)/2 > 0.08``; 8-connected
    components smaller than 5 px are discarded. Returns ``(count / tile
    area in px, mean component area in px)``; both are 0 by convention when
    nothing is detected.
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise MetricError("count_nuclei expects an H x W x 3 stained tile")
    mask = nuclei_mask(arr)
    labeled, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return 0.0, 0.0
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    sizes = sizes[sizes >= MIN_COMPONENT_PX]
    if sizes.size == 0:
        return 0.0, 0.0
    area = arr.shape[0] * arr.shape[1]
    return float(sizes.size / area), float(sizes.mean())
