from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone

from stainqa import (
    Backbone,
    CycleEnsembleClassifier,
    ScoreRecord,
    classify,
    pretrain_backbone,
    score_features,
    train_heads,
)
from stainqa.ensemble import EnsembleError, load_heads, majority_fraction, save_heads

SIZE = 32


def _frames(n, seed, blur=False):
    rng = np.random.default_rng(seed)
    base = rng.random((n, SIZE, SIZE, 3)).astype(np.float32)
    if blur:
        from scipy import ndimage

        base = np.stack(
            [ndimage.gaussian_filter(f, sigma=(2.0, 2.0, 0.0)) for f in base]
        ).astype(np.float32)
    return np.clip(base, 0.0, 1.0)


def _sequences(n, seed, t=4, blur=False):
    frames = _frames(n * t, seed, blur=blur)
    return frames.reshape(n, t, SIZE, SIZE, 3)


@pytest.fixture(scope="module")
def backbone():
    bb, history = pretrain_backbone(_frames(48, 0), epochs=4, seed=0)
    return bb, history


def test_pretrain_deterministic(backbone):
    bb, _ = backbone
    again, _ = pretrain_backbone(_frames(48, 0), epochs=4, seed=0)
    assert bb.weight_hash() == again.weight_hash()


def test_pretrain_improves_on_untrained_baseline(backbone):
    _, history = backbone
    assert history[-1]["recon_loss"] < history[0]["recon_loss"]
    assert history[0]["epoch"] == 0


def test_identical_frames_get_identical_features(backbone):
    bb, _ = backbone
    frame = _frames(1, 5)
    feats = bb.encode_stack(np.concatenate([frame, frame]))
    assert np.array_equal(feats[0], feats[1])


def test_backbone_roundtrip(tmp_path, backbone):
    bb, _ = backbone
    path = tmp_path / "bb.arr"
    bb.save(path)
    loaded = Backbone.load(path)
    assert loaded.weight_hash() == bb.weight_hash()
    frames = _frames(3, 9)
    assert np.array_equal(loaded.encode_stack(frames), bb.encode_stack(frames))


def _labeled_features(backbone, n=40, t=4):
    bb, _ = backbone
    neg = _sequences(n // 2, 1, t=t)
    pos = _sequences(n // 2, 2, t=t, blur=True)
    seqs = np.concatenate([neg, pos])
    labels = np.array([0] * (n // 2) + [1] * (n // 2))
    return bb.encode_sequences(seqs), labels


def test_heads_differ_pairwise_and_are_deterministic(backbone):
    feats, labels = _labeled_features(backbone)
    heads = train_heads(feats, labels, num_heads=4, seed=0, epochs=60)
    hashes = [h.weight_hash() for h in heads]
    assert len(set(hashes)) == 4
    again = train_heads(feats, labels, num_heads=4, seed=0, epochs=60)
    assert [h.weight_hash() for h in again] == hashes
    boots = {tuple(h.bootstrap_indices) for h in heads}
    assert len(boots) == 4


def test_head_prefix_matches_smaller_ensemble(backbone):
    feats, labels = _labeled_features(backbone)
    five = train_heads(feats, labels, num_heads=5, seed=3, epochs=40)
    one = train_heads(feats, labels, num_heads=1, seed=3, epochs=40)
    assert five[0].weight_hash() == one[0].weight_hash()


def test_frozen_backbone_untouched_by_head_training(backbone):
    bb, _ = backbone
    before = bb.weight_hash()
    feats, labels = _labeled_features(backbone)
    train_heads(feats, labels, num_heads=2, seed=0, epochs=40)
    assert bb.weight_hash() == before


def test_single_class_training_rejected(backbone):
    feats, labels = _labeled_features(backbone)
    with pytest.raises(EnsembleError):
        train_heads(feats, np.zeros_like(labels), num_heads=2, seed=0, epochs=10)


def test_scores_bounded_and_deterministic(backbone):
    feats, labels = _labeled_features(backbone)
    heads = train_heads(feats, labels, num_heads=3, seed=0, epochs=60)
    per_head, mean = score_features(feats, heads)
    assert per_head.shape == (40, 3)
    assert np.all(per_head > 0.0) and np.all(per_head < 1.0)
    per_head2, mean2 = score_features(feats, heads)
    assert np.array_equal(per_head, per_head2)
    assert np.allclose(mean, per_head.mean(axis=1))


def test_mean_score_invariant_under_head_permutation(backbone):
    feats, labels = _labeled_features(backbone)
    heads = train_heads(feats, labels, num_heads=4, seed=1, epochs=40)
    _, mean_fwd = score_features(feats, heads)
    _, mean_rev = score_features(feats, heads[::-1])
    assert np.allclose(mean_fwd, mean_rev, atol=1e-12)


def test_cycle_count_mismatch_rejected(backbone):
    feats, labels = _labeled_features(backbone, t=4)
    heads = train_heads(feats, labels, num_heads=1, seed=0, epochs=10)
    with pytest.raises(EnsembleError):
        heads[0].score_features(feats[:, :2])


def test_heads_roundtrip(tmp_path, backbone):
    feats, labels = _labeled_features(backbone)
    heads = train_heads(feats, labels, num_heads=2, seed=0, epochs=40)
    save_heads(heads, tmp_path / "heads.arr")
    loaded = load_heads(tmp_path / "heads.arr")
    _, before = score_features(feats, heads)
    _, after = score_features(feats, loaded)
    assert np.array_equal(before, after)


def test_majority_fraction():
    per_head = np.array([[0.9, 0.2, 0.7], [0.1, 0.2, 0.3]])
    assert np.allclose(majority_fraction(per_head), [2 / 3, 0.0])


# --- score records and thresholding ----------------------------------------

def test_score_record_mean_invariant():
    with pytest.raises(EnsembleError):
        ScoreRecord("t", [0.2, 0.4], 0.5)
    rec = ScoreRecord("t", [0.2, 0.4], 0.3)
    assert rec.num_heads == 2


def test_classify_thresholds():
    assert classify(ScoreRecord("a", [0.9], 0.9), 0.5253) == "reject"
    assert classify(ScoreRecord("b", [0.1], 0.1), 0.6263) == "accept"
    assert classify(ScoreRecord("c", [0.5], 0.5), 0.5) == "reject"  # tie rejects
    with pytest.raises(EnsembleError):
        classify(ScoreRecord("d", [0.5], 0.5), 1.5)


# --- estimator wrapper ------------------------------------------------------

def test_classifier_estimator_fit_predict():
    neg = _sequences(10, 11, t=3)
    pos = _sequences(10, 12, t=3, blur=True)
    seqs = np.concatenate([neg, pos])
    y = np.array([0] * 10 + [1] * 10)
    clf = CycleEnsembleClassifier(num_heads=2, backbone_epochs=2, head_epochs=60, seed=0)
    clf.fit(seqs, y)
    proba = clf.predict_proba(seqs)
    assert proba.shape == (20, 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    scores = clf.decision_scores(seqs)
    assert np.all((scores > 0) & (scores < 1))
    preds = clf.predict(seqs, alpha=0.5)
    assert set(np.unique(preds)) <= {0, 1}
    assert clf.backbone_hash_ == clf.backbone_.weight_hash()


def test_classifier_estimator_sklearn_clone():
    clf = CycleEnsembleClassifier(num_heads=3, combine="majority", seed=5)
    twin = clone(clf)
    assert twin.get_params() == clf.get_params()


def test_classifier_requires_negatives():
    seqs = _sequences(4, 13, t=2)
    with pytest.raises(EnsembleError):
        CycleEnsembleClassifier(backbone_epochs=1, head_epochs=5).fit(seqs, np.ones(4))
