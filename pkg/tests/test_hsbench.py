from __future__ import annotations

import numpy as np
import pytest

from stainqa import Patch, TissueSpec
from stainqa.hsbench import (
    HsBenchmarkError,
    build_hs_benchmark,
    corrupted_id,
    materialize,
    run_hs_assessment,
)
from stainqa.synth import render_tile


def _roles(n_train=4, n_val=2, n_test=3):
    ids = [f"tile_{i:03d}" for i in range(n_train + n_val + n_test)]
    return {
        "train": ids[:n_train],
        "val": ids[n_train : n_train + n_val],
        "test": ids[n_train + n_val :],
    }


def test_cross_product_counts():
    bench = build_hs_benchmark(_roles(50, 0, 0), severities=(0.3, 0.6, 0.9))
    assert len(bench.corrupted["train"]) == 50 * 3 * 3


def test_eval_severity_adds_test_positives():
    bench = build_hs_benchmark(_roles(), severities=(0.3, 0.9), eval_severity=0.45)
    assert len(bench.corrupted["test"]) == 3 * 3 * 2 + 3 * 3
    assert len(bench.corrupted["val"]) == 2 * 3 * 2


def test_empty_severity_list_invalid():
    with pytest.raises(HsBenchmarkError):
        build_hs_benchmark(_roles(), severities=())


def test_unknown_mode_rejected():
    with pytest.raises(HsBenchmarkError):
        build_hs_benchmark(_roles(), modes=("sharpen",))


def test_benchmark_is_deterministic():
    a = build_hs_benchmark(_roles(), severities=(0.3, 0.6))
    b = build_hs_benchmark(_roles(), severities=(0.3, 0.6))
    assert a.corrupted == b.corrupted
    assert a.clean == b.clean


def test_derived_ids_are_disjoint_from_clean():
    bench = build_hs_benchmark(_roles(), severities=(0.3,))
    clean = {t for ids in bench.clean.values() for t in ids}
    derived = {
        corrupted_id(e["tile_id"], e["mode"], e["severity"])
        for entries in bench.corrupted.values()
        for e in entries
    }
    assert not clean & derived


def _tile_loader():
    tiles = {}

    def load(tile_id):
        if tile_id not in tiles:
            seed = int(tile_id.split("_")[1])
            spec = TissueSpec(6, (2.5, 4.5), 0.8, 0.4, seed)
            _, he, _ = render_tile(spec, 32)
            tiles[tile_id] = Patch(he, "he", tile_id=tile_id)
        return tiles[tile_id]

    return load


def test_materialize_aligns_labels():
    bench = build_hs_benchmark(_roles(2, 1, 2), severities=(0.5,))
    stack, ids, labels, entries = materialize(bench, "train", _tile_loader())
    assert stack.shape[0] == 2 + 2 * 3
    assert labels.sum() == 6
    assert entries[0] is None and entries[-1] is not None


class BrightnessScorer:
    """Stub: darker tiles score higher (washout/fade reduce contrast)."""

    def score_arrays(self, stack, return_features=False):
        contrast = stack.astype(np.float64).std(axis=(1, 2, 3))
        score = np.clip(1.0 - 6.0 * contrast, 1e-6, 1 - 1e-6)
        per_head = score[:, None]
        drift = np.zeros((stack.shape[0], 0))
        if return_features:
            return per_head, score, score, drift, None
        return per_head, score, score, drift


def test_run_hs_assessment_smoke():
    bench = build_hs_benchmark(_roles(2, 1, 4), severities=(0.4, 0.9))
    result = run_hs_assessment(bench, _tile_loader(), BrightnessScorer(), alpha=0.5)
    assert 0.0 <= result["auc_score"] <= 1.0
    assert set(result["auc_baselines"]) == {"nuclei_count", "nuclei_area"}
    for name, value in result["auc_baselines"].items():
        assert 0.5 <= value <= 1.0  # oriented AUC
    assert len(result["rows"]) == 4 + 4 * 3 * 2  # clean + tiles x modes x severities
    modes = {(r["mode"], r["severity"]) for r in result["rejection_rows"]}
    assert len(modes) == 3 * 2
    assert all(0.0 <= r["rejection_rate"] <= 1.0 for r in result["rejection_rows"])
