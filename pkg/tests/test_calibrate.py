from __future__ import annotations

import numpy as np
import pytest

from stainqa import (
    CalibrationResult,
    ScoreRecord,
    assess_model,
    calibrate_alpha,
    calibrate_beta,
    resampling_study,
)
from stainqa.calibrate import CalibrationError, gaussian_pdf


def _records(positives, negatives):
    recs = []
    for i, s in enumerate(positives):
        recs.append(ScoreRecord(f"p{i}", [s], s, label_true="positive"))
    for i, s in enumerate(negatives):
        recs.append(ScoreRecord(f"n{i}", [s], s, label_true="negative"))
    return recs


# --- alpha -----------------------------------------------------------------

def test_alpha_is_min_positive():
    assert calibrate_alpha(_records([0.6, 0.8], [0.1, 0.2])) == 0.6


def test_alpha_keeps_sensitivity_when_negative_above():
    recs = _records([0.5], [0.7])
    alpha = calibrate_alpha(recs)
    assert alpha == 0.5
    # the negative at 0.7 is also rejected: sensitivity holds, specificity pays
    assert 0.7 >= alpha


def test_alpha_requires_positives():
    with pytest.raises(CalibrationError):
        calibrate_alpha(_records([], [0.1]))


def test_alpha_midpoint_variant():
    alpha = calibrate_alpha(_records([0.6, 0.8], [0.1, 0.4]), mode="midpoint")
    assert alpha == pytest.approx(0.5)
    assert alpha < 0.6


# --- beta ------------------------------------------------------------------

def _gauss_samples(rng, mu, sigma, n=50):
    return rng.normal(mu, sigma, n)


def test_beta_symmetric_case_is_midpoint():
    # construct samples whose ddof=1 stds are exactly equal by mirroring
    good = np.array([0.1, 0.2, 0.3])
    poor = np.array([0.7, 0.8, 0.9])
    beta, params = calibrate_beta(good, poor)
    assert beta == pytest.approx(0.5, abs=1e-12)
    assert params["sigma_good"] == pytest.approx(params["sigma_poor"])


def test_beta_matches_dense_density_scan():
    # fixed-parameter case evaluated against a brute-force scan of the two
    # fitted density curves
    good = np.array([-1.0, 0.0, 1.0])  # mean 0, std 1
    poor = np.array([2.0, 4.0, 6.0])  # mean 4, std 2
    beta, params = calibrate_beta(good, poor)
    xs = np.linspace(0.0, 4.0, 2_000_001)
    diff = np.abs(
        gaussian_pdf(xs, params["mu_good"], params["sigma_good"])
        - gaussian_pdf(xs, params["mu_poor"], params["sigma_poor"])
    )
    scan_root = xs[np.argmin(diff)]
    assert beta == pytest.approx(scan_root, abs=1e-5)
    assert 0.0 < beta < 4.0


def test_beta_equal_density_on_random_draws():
    # acceptance-grade property: the defining equation holds at the returned
    # threshold for 100 random parameter draws
    rng = np.random.default_rng(123)
    for _ in range(100):
        mu_g = rng.uniform(0.05, 0.4)
        mu_p = rng.uniform(0.6, 0.95)
        good = _gauss_samples(rng, mu_g, rng.uniform(0.02, 0.15))
        poor = _gauss_samples(rng, mu_p, rng.uniform(0.02, 0.15))
        beta, params = calibrate_beta(good, poor)
        density_gap = abs(
            gaussian_pdf(beta, params["mu_good"], params["sigma_good"])
            - gaussian_pdf(beta, params["mu_poor"], params["sigma_poor"])
        )
        assert density_gap < 1e-9
        lo = min(params["mu_good"], params["mu_poor"])
        hi = max(params["mu_good"], params["mu_poor"])
        assert lo < beta < hi


def test_beta_rejects_degenerate_inputs():
    with pytest.raises(CalibrationError):
        calibrate_beta([0.5], [0.7, 0.8])
    with pytest.raises(CalibrationError):
        calibrate_beta([0.4, 0.6], [0.4, 0.6])


def test_beta_handles_tied_class_scores():
    # a fully saturated class still yields a boundary between the means
    beta, _ = calibrate_beta([0.1, 0.1], [0.7, 0.8])
    assert 0.1 < beta < 0.75


def test_calibration_result_invariant(tmp_path):
    result = CalibrationResult(
        alpha=0.5, beta=0.6, val_positive_min_score=0.5,
        lda_params={"mu_good": 0.2, "mu_poor": 0.8},
    ).validate()
    path = tmp_path / "calib.json"
    result.save(path)
    loaded = CalibrationResult.load(path)
    assert loaded.alpha == result.alpha
    assert loaded.lda_params == result.lda_params
    with pytest.raises(CalibrationError):
        CalibrationResult(0.7, 0.6, 0.5, {}).validate()


# --- model-level assessment -------------------------------------------------

class StubScorer:
    """Scores each stained image by its mean brightness."""

    def score_model_images(self, model, af_stack):
        he = model.apply_stack(af_stack)
        mean = he.mean(axis=(1, 2, 3)).astype(np.float64)
        return None, mean, mean, None


class StubModel:
    ckpt_id = "stub-model"

    def __init__(self, offset):
        self.offset = offset

    def apply_stack(self, af_stack):
        bright = np.clip(af_stack + self.offset, 0.0, 1.0)
        return np.repeat(bright, 3, axis=3)


def _af_pool(n=30, value=0.2):
    return np.full((n, 8, 8, 1), value, dtype=np.float32)


def test_assess_model_n1_equals_single_image_score():
    verdict = assess_model(
        StubModel(0.0), _af_pool(), [f"t{i}" for i in range(30)],
        StubScorer(), beta=0.5, sample_size=1, seed=0,
    )
    assert verdict.sample_size == 1
    assert verdict.mean_score == pytest.approx(0.2, abs=1e-6)
    assert verdict.verdict == "accept_model"
    assert len(verdict.sample_tile_ids) == 1


def test_assess_model_rejects_above_beta():
    verdict = assess_model(
        StubModel(0.6), _af_pool(), [f"t{i}" for i in range(30)],
        StubScorer(), beta=0.5, sample_size=5, seed=0,
    )
    assert verdict.verdict == "reject_model"


def test_assess_model_pool_too_small():
    with pytest.raises(CalibrationError):
        assess_model(StubModel(0.0), _af_pool(3), ["a", "b", "c"],
                     StubScorer(), beta=0.5, sample_size=5)


def test_resampling_study_shapes_and_concentration():
    rng = np.random.default_rng(0)
    af = rng.uniform(0.1, 0.9, size=(40, 8, 8, 1)).astype(np.float32)
    models = [
        ("good-1", StubModel(-0.05), "good"),
        ("good-2", StubModel(-0.02), "good"),
        ("poor-1", StubModel(0.45), "poor_early"),
        ("poor-2", StubModel(0.5), "poor_early"),
    ]
    study = resampling_study(models, af, [f"t{i}" for i in range(40)], StubScorer(),
                             beta=0.75, sample_grid=[2, 20], repeats=50, seed=1)
    assert len(study["long"]) == 4 * 2 * 50
    assert len(study["summary"]) == 4 * 2
    by_model_n = {(r["model_id"], r["sample_size"]): r for r in study["summary"]}
    for model_id, _, _ in models:
        assert by_model_n[(model_id, 20)]["std_sbar"] <= by_model_n[(model_id, 2)]["std_sbar"]
    accs = {r["sample_size"]: r["accuracy"] for r in study["by_n"]}
    assert accs[20] >= accs[2]


def test_resampling_study_single_repeat_has_no_std():
    af = _af_pool(25)
    models = [("g", StubModel(-0.1), "good"), ("p", StubModel(0.6), "poor_early")]
    study = resampling_study(models, af, [f"t{i}" for i in range(25)], StubScorer(),
                             beta=0.5, sample_grid=[2], repeats=1, seed=0)
    assert all(r["std_sbar"] is None for r in study["summary"])
