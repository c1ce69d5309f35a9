from __future__ import annotations

import numpy as np
import pytest

from stainqa import Patch, StainTranslator, TissueSpec, label_checkpoint
from stainqa.synth import render_tile
from stainqa.translate import Checkpoint, DivergenceError, TranslatorError

SIZE = 32


def _stacks(n, seed0, size=SIZE):
    afs, hes = [], []
    for i in range(n):
        spec = TissueSpec(4, (2.5, 4.0), 0.8, 0.4, seed0 + i)
        af, he, _ = render_tile(spec, size)
        afs.append(af)
        hes.append(he)
    return np.stack(afs), np.stack(hes)


@pytest.fixture(scope="module")
def data():
    af_tr, he_tr = _stacks(8, 100)
    af_va, he_va = _stacks(4, 900)
    return af_tr, he_tr, af_va, he_va


def _fit(data, **kw):
    af_tr, he_tr, af_va, he_va = data
    base = dict(direction="af_to_he", epochs=4, cadence=2, lr=2e-3,
                batch_size=4, lr_drop_epoch=3, seed=0)
    base.update(kw)
    est = StainTranslator(**base)
    if base["direction"] == "af_to_he":
        return est.fit(af_tr, he_tr, af_va, he_va)
    return est.fit(he_tr, af_tr, he_va, af_va)


def test_zero_epochs_returns_initialization(data):
    est = _fit(data, epochs=0)
    assert len(est.checkpoints_) == 1
    ckpt = est.checkpoints_[0]
    assert ckpt.epoch == 0
    # the recorded validation loss is the untrained baseline
    af_va, he_va = data[2], data[3]
    out = ckpt.apply_stack(af_va)
    baseline = float(np.abs(out.astype(np.float64) - he_va).mean())
    assert ckpt.val_loss == pytest.approx(baseline, abs=1e-6)


def test_training_is_bit_deterministic(data):
    a = _fit(data)
    b = _fit(data)
    assert len(a.checkpoints_) == len(b.checkpoints_)
    for ca, cb in zip(a.checkpoints_, b.checkpoints_):
        assert ca.epoch == cb.epoch
        for k in ca.weights:
            assert np.array_equal(ca.weights[k], cb.weights[k])


def test_seed_changes_trajectory(data):
    a = _fit(data, seed=0)
    b = _fit(data, seed=1)
    assert any(
        not np.array_equal(a.checkpoints_[-1].weights[k], b.checkpoints_[-1].weights[k])
        for k in a.checkpoints_[-1].weights
    )


def test_final_val_not_worse_than_first(data):
    est = _fit(data, epochs=8)
    assert est.history_[-1]["val_loss"] <= est.history_[0]["val_loss"]


def test_inference_is_deterministic_and_clamped(data):
    est = _fit(data)
    af_va = data[2]
    out1 = est.transform(af_va)
    out2 = est.transform(af_va)
    assert np.array_equal(out1, out2)
    assert out1.min() >= 0.0 and out1.max() <= 1.0
    assert out1.shape == (4, SIZE, SIZE, 3)


def test_apply_rejects_wrong_domain(data):
    est = _fit(data)
    he = Patch(np.zeros((SIZE, SIZE, 3), dtype=np.float32), "he")
    with pytest.raises(Exception):
        est.final_checkpoint_.apply(he)


def test_checkpoint_roundtrip_bit_exact(tmp_path, data):
    est = _fit(data)
    ckpt = est.final_checkpoint_
    ckpt.quality_label = "good"
    path = tmp_path / "ckpt.arr"
    ckpt.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.epoch == ckpt.epoch
    assert loaded.quality_label == "good"
    assert loaded.ckpt_id == ckpt.ckpt_id
    probe = data[2]
    assert np.array_equal(loaded.apply_stack(probe), ckpt.apply_stack(probe))


def test_overfit_subset_trains_on_subset_and_gaps(data):
    est = _fit(data, regime="overfit_subset", subset_size=2, epochs=120,
               cadence=40, lr_drop_epoch=60, val_cadence=40)
    fin = est.final_checkpoint_
    assert fin.regime == "overfit_subset"
    assert fin.train_subset_size == 2
    assert fin.train_loss < fin.val_loss


def test_backward_direction_shapes(data):
    est = _fit(data, direction="he_to_af", epochs=2)
    out = est.transform(data[1])
    assert out.shape == (8, SIZE, SIZE, 1)


def test_adversarial_term_smoke(data):
    est = _fit(data, adv_weight=0.05, epochs=2)
    assert np.isfinite(est.history_[-1]["train_loss"])


def test_divergence_reports_epoch(data):
    with pytest.raises(DivergenceError) as exc:
        _fit(data, lr=1e30, epochs=3)
    assert exc.value.epoch >= 1


def test_invalid_params_rejected(data):
    with pytest.raises(TranslatorError):
        _fit(data, direction="he_to_he")
    with pytest.raises(TranslatorError):
        _fit(data, regime="underfit")
    with pytest.raises(TranslatorError):
        _fit(data, cadence=0)


# --- labeling rule ----------------------------------------------------------

def _meta_ckpt(epoch, val_loss, regime="full"):
    return Checkpoint(
        weights={"w": np.zeros(1, dtype=np.float32)},
        direction="af_to_he",
        epoch=epoch,
        train_loss=val_loss,
        val_loss=val_loss,
        regime=regime,
    )


def test_label_poor_early_when_both_criteria_fail():
    assert label_checkpoint(_meta_ckpt(5, 0.30), epoch_min=50, val_max=0.05) == "poor_early"


def test_label_good_when_both_criteria_pass():
    assert label_checkpoint(_meta_ckpt(80, 0.03), epoch_min=50, val_max=0.05) == "good"


def test_label_overfit_regime_wins_regardless_of_losses():
    ckpt = _meta_ckpt(80, 0.001, regime="overfit_subset")
    assert label_checkpoint(ckpt, epoch_min=50, val_max=0.05) == "poor_overfit"


def test_label_requires_both_criteria():
    assert label_checkpoint(_meta_ckpt(80, 0.30), epoch_min=50, val_max=0.05) == "poor_early"
    assert label_checkpoint(_meta_ckpt(5, 0.03), epoch_min=50, val_max=0.05) == "poor_early"


def test_label_rejects_non_finite_thresholds():
    with pytest.raises(TranslatorError):
        label_checkpoint(_meta_ckpt(5, 0.3), epoch_min=float("nan"), val_max=0.05)
