"""Metric identity suite: exact identities plus independent-oracle checks.

This module is the fast half of the acceptance gate: everything here runs
in well under ten seconds.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from stainqa import (
    TissueSpec,
    auc,
    confusion,
    corrupt_hs,
    count_nuclei,
    generate_pair,
    kl_divergence,
    mse,
    pcc,
    psnr,
    welch_t,
)
from stainqa.metrics import MetricError

EXACT = 1e-9
ORACLE = 1e-12


def _tile(seed, shape=(16, 16, 3)):
    return np.random.default_rng(seed).random(shape)


# --- mse -------------------------------------------------------------------

def test_mse_identical_is_zero():
    x = _tile(1)
    assert mse(x, x) == 0.0


def test_mse_zeros_vs_ones():
    a = np.zeros((8, 8, 3))
    b = np.ones((8, 8, 3))
    assert abs(mse(a, b) - 1.0) < EXACT


def test_mse_matches_double_precision_summation_oracle():
    a = _tile(11)
    b = _tile(12)
    total = math.fsum(
        (float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())
    )
    assert abs(mse(a, b) - total / a.size) < ORACLE


def test_mse_shape_mismatch():
    with pytest.raises(MetricError):
        mse(np.zeros((4, 4, 3)), np.zeros((5, 5, 3)))


# --- pcc -------------------------------------------------------------------

def test_pcc_self_is_one():
    x = _tile(2)
    assert abs(pcc(x, x) - 1.0) < EXACT


def test_pcc_reversal_is_minus_one():
    x = _tile(3)
    assert abs(pcc(x, 1.0 - x) + 1.0) < EXACT


def test_pcc_positive_affine_invariance():
    x = _tile(4)
    assert abs(pcc(x, 0.5 + 0.25 * x) - 1.0) < EXACT


def test_pcc_zero_variance_is_error():
    with pytest.raises(MetricError):
        pcc(np.full((4, 4, 3), 0.5), _tile(5))


# --- psnr ------------------------------------------------------------------

def test_psnr_identical_hits_cap():
    x = _tile(6)
    assert psnr(x, x) == 100.0


def test_psnr_analytic_20db():
    a = np.zeros((10, 10, 3))
    b = np.full((10, 10, 3), 0.1)
    assert abs(psnr(a, b) - 20.0) < EXACT


def test_psnr_analytic_0db():
    a = np.zeros((10, 10, 3))
    b = np.ones((10, 10, 3))
    assert abs(psnr(a, b) - 0.0) < EXACT


# --- welch t ---------------------------------------------------------------

def test_welch_identical_groups_zero():
    g = [0.3, 0.5, 0.7, 0.9]
    assert abs(welch_t(g, g)) < EXACT


def test_welch_matches_formula_oracle():
    pos, neg = [2.0, 3.0], [0.0, 1.0]
    # independent evaluation of |mu_p - mu_n| / sqrt(s_p^2/n_p + s_n^2/n_n)
    sp2 = ((2.0 - 2.5) ** 2 + (3.0 - 2.5) ** 2) / 1.0
    sn2 = ((0.0 - 0.5) ** 2 + (1.0 - 0.5) ** 2) / 1.0
    expected = abs(2.5 - 0.5) / math.sqrt(sp2 / 2 + sn2 / 2)
    assert abs(welch_t(pos, neg) - expected) < ORACLE
    scipy_t = stats.ttest_ind(pos, neg, equal_var=False).statistic
    assert abs(welch_t(pos, neg) - abs(scipy_t)) < ORACLE


def test_welch_scale_invariance():
    rng = np.random.default_rng(7)
    pos = rng.normal(1.0, 0.2, 30)
    neg = rng.normal(0.0, 0.3, 25)
    base = welch_t(pos, neg)
    for c in (0.5, 2.0, 17.0):
        assert abs(welch_t(c * pos, c * neg) - base) < 1e-9 * max(1.0, base)


def test_welch_degenerate_variance_is_error():
    with pytest.raises(MetricError):
        welch_t([1.0, 1.0], [2.0, 2.0])


# --- kl divergence ---------------------------------------------------------

def test_kl_identical_samples_zero():
    x = np.linspace(0, 1, 50)
    assert abs(kl_divergence(x, x)) < EXACT


def test_kl_disjoint_support_large_but_finite():
    pos = np.linspace(0.0, 0.1, 40)
    neg = np.linspace(0.9, 1.0, 40)
    value = kl_divergence(pos, neg)
    assert np.isfinite(value)
    assert value > 1.0
    # smoothing bounds the divergence near log(n/eps)
    assert value < math.log(40 / 1e-10)


def test_kl_matches_histogram_oracle():
    rng = np.random.default_rng(21)
    pos = rng.normal(0.6, 0.1, 200)
    neg = rng.normal(0.4, 0.15, 180)
    lo = min(pos.min(), neg.min())
    hi = max(pos.max(), neg.max())
    hp, _ = np.histogram(pos, bins=20, range=(lo, hi))
    hn, _ = np.histogram(neg, bins=20, range=(lo, hi))
    p = hp + 1e-10
    q = hn + 1e-10
    p = p / p.sum()
    q = q / q.sum()
    expected = math.fsum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    assert abs(kl_divergence(pos, neg) - expected) < ORACLE


def test_kl_is_directional():
    rng = np.random.default_rng(22)
    pos = rng.normal(0.7, 0.05, 300)
    neg = rng.normal(0.3, 0.2, 300)
    assert kl_divergence(pos, neg) != kl_divergence(neg, pos)


# --- confusion -------------------------------------------------------------

def test_confusion_all_correct():
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    labels = np.array([1, 1, 0, 0])
    rep = confusion(scores, labels, 0.5)
    assert rep.accuracy == 1.0
    assert rep.sensitivity == 1.0
    assert rep.specificity == 1.0
    assert (rep.true_pos, rep.false_pos, rep.true_neg, rep.false_neg) == (2, 0, 2, 0)


def test_confusion_zero_threshold_rejects_everything():
    scores = np.array([0.9, 0.8, 0.1, 0.2])
    labels = np.array([1, 1, 0, 0])
    rep = confusion(scores, labels, 0.0)
    assert rep.sensitivity == 1.0
    assert rep.specificity == 0.0


def test_confusion_counts_sum_to_sample_size():
    rng = np.random.default_rng(3)
    scores = rng.random(50)
    labels = (rng.random(50) > 0.5).astype(int)
    rep = confusion(scores, labels, 0.4)
    assert rep.true_pos + rep.false_pos + rep.true_neg + rep.false_neg == 50


# --- auc -------------------------------------------------------------------

def test_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(9)
    pos = rng.normal(0.6, 0.2, 40)
    neg = rng.normal(0.4, 0.2, 35)
    wins = math.fsum(
        1.0 if p > n else (0.5 if p == n else 0.0) for p in pos for n in neg
    )
    assert abs(auc(pos, neg) - wins / (40 * 35)) < ORACLE


def test_auc_with_ties():
    assert abs(auc([1.0, 1.0], [1.0, 1.0]) - 0.5) < EXACT


def test_auc_perfect_separation():
    assert abs(auc([0.9, 0.8], [0.1, 0.2]) - 1.0) < EXACT


# --- nuclei counting -------------------------------------------------------

def _spec(count, seed):
    return TissueSpec(
        nuclei_count=count,
        nuclei_radius_range=(3.0, 6.5),
        background_texture_scale=0.8,
        cytoplasm_density=0.4,
        rng_seed=seed,
    )


def test_count_nuclei_empty_tile():
    _, he = generate_pair(_spec(0, 3), tile_size=128)
    assert count_nuclei(he.pixels) == (0.0, 0.0)


def test_count_nuclei_matches_generator_oracle():
    _, he = generate_pair(_spec(20, 7), tile_size=128)
    per_area, mean_area = count_nuclei(he.pixels)
    counted = per_area * 128 * 128
    assert abs(counted - 20) <= 1  # within 5% of the placement-list oracle
    assert mean_area > 5.0


def test_count_nuclei_drops_after_washout():
    _, he = generate_pair(_spec(20, 7), tile_size=128)
    clean_count = count_nuclei(he.pixels)[0]
    washed = corrupt_hs(he, "stain_washout", 1.0)
    assert count_nuclei(washed.pixels)[0] < clean_count
