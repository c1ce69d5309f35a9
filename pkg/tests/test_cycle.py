from __future__ import annotations

import numpy as np
import pytest

from stainqa import Patch, drift_profile, run_cycles, run_cycles_stack
from stainqa.cycle import CycleError, load_cycleseq, save_cycleseq


class StubTranslator:
    """Duck-typed checkpoint: applies a fixed function."""

    def __init__(self, direction, fn, ckpt_id="stub"):
        from stainqa.translate import DIRECTIONS

        self.direction = direction
        self.input_domain, self.output_domain = DIRECTIONS[direction]
        self.fn = fn
        self.ckpt_id = ckpt_id

    def apply_stack(self, stack):
        return np.clip(self.fn(stack), 0.0, 1.0).astype(np.float32)

    def apply(self, patch):
        out = self.apply_stack(patch.pixels[None])[0]
        return Patch(out, self.output_domain, tile_id=patch.tile_id, seed=patch.seed)


def identity_pair():
    # vs . vaf acts as the identity on stained tiles: vaf keeps the mean
    # channel, vs replicates it back into three channels only when composed
    vaf = StubTranslator("he_to_af", lambda he: he.mean(axis=3, keepdims=True), "vaf-id")
    vs = StubTranslator("af_to_he", lambda af: np.repeat(af, 3, axis=3), "vs-id")
    return vs, vaf


def gray_tile(value=0.5, size=16):
    return Patch(np.full((size, size, 3), value, dtype=np.float32), "he", tile_id="t0")


def test_single_cycle_is_input_only():
    vs, vaf = identity_pair()
    seq = run_cycles(gray_tile(), vs, vaf, 1)
    assert seq.num_cycles == 1
    assert np.array_equal(seq.frames[0], gray_tile().pixels)


def test_identity_pair_fixed_point():
    vs, vaf = identity_pair()
    he = gray_tile(0.37)
    seq = run_cycles(he, vs, vaf, 5)
    for frame in seq.frames:
        assert np.allclose(frame, he.pixels, atol=1e-6)
    assert drift_profile(seq) == pytest.approx([0.0] * 4, abs=1e-6)


def test_constant_output_stub_absorbs():
    vaf = StubTranslator("he_to_af", lambda he: he.mean(axis=3, keepdims=True))
    vs = StubTranslator("af_to_he", lambda af: np.full(af.shape[:3] + (3,), 0.25))
    he = gray_tile(0.9)
    seq = run_cycles(he, vs, vaf, 5)
    drifts = drift_profile(seq)
    assert drifts[0] > 0.0
    assert drifts == pytest.approx([drifts[0]] * 4, abs=1e-7)


def test_prefix_property():
    rng = np.random.default_rng(0)
    vaf = StubTranslator("he_to_af", lambda he: he.mean(axis=3, keepdims=True) ** 1.1)
    vs = StubTranslator("af_to_he", lambda af: np.repeat(np.sqrt(af), 3, axis=3))
    stack = rng.random((3, 16, 16, 3)).astype(np.float32)
    full = run_cycles_stack(stack, vs, vaf, 6)
    for k in (1, 2, 4):
        prefix = run_cycles_stack(stack, vs, vaf, k)
        assert np.array_equal(full[:, :k], prefix)


def test_run_twice_is_identical():
    vs, vaf = identity_pair()
    rng = np.random.default_rng(1)
    stack = rng.random((2, 16, 16, 3)).astype(np.float32)
    a = run_cycles_stack(stack, vs, vaf, 4)
    b = run_cycles_stack(stack, vs, vaf, 4)
    assert np.array_equal(a, b)


def test_frames_stay_in_range():
    vaf = StubTranslator("he_to_af", lambda he: he.mean(axis=3, keepdims=True) * 3.0)
    vs = StubTranslator("af_to_he", lambda af: np.repeat(af * 2.0 - 0.3, 3, axis=3))
    stack = np.random.default_rng(2).random((2, 16, 16, 3)).astype(np.float32)
    frames = run_cycles_stack(stack, vs, vaf, 5)
    assert frames.min() >= 0.0
    assert frames.max() <= 1.0


def test_direction_validation():
    vs, vaf = identity_pair()
    he = gray_tile()
    with pytest.raises(CycleError):
        run_cycles(he, vaf, vs, 3)  # swapped
    with pytest.raises(CycleError):
        run_cycles(he, vs, vaf, 0)


def test_drift_needs_two_frames():
    vs, vaf = identity_pair()
    seq = run_cycles(gray_tile(), vs, vaf, 1)
    with pytest.raises(CycleError):
        drift_profile(seq)


def test_keep_af_returns_intermediates():
    vs, vaf = identity_pair()
    stack = np.random.default_rng(3).random((2, 16, 16, 3)).astype(np.float32)
    frames, afs = run_cycles_stack(stack, vs, vaf, 4, keep_af=True)
    assert frames.shape == (2, 4, 16, 16, 3)
    assert afs.shape == (2, 3, 16, 16, 1)


def test_cycleseq_roundtrip(tmp_path):
    vs, vaf = identity_pair()
    seq = run_cycles(gray_tile(0.6), vs, vaf, 3)
    path = tmp_path / "seq.arr"
    save_cycleseq(seq, path)
    loaded = load_cycleseq(path)
    assert np.array_equal(loaded.frames, seq.frames)
    assert loaded.source_tile_id == "t0"
    assert (tmp_path / "seq.arr.json").exists()
