from __future__ import annotations

import io
from collections import deque

import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crashdet.errors import FlowError
from crashdet.flow_vif import (
    DescriptorCache,
    FlowField,
    FlowParams,
    crop_sequence,
    horn_schunck,
    horn_schunck_energy,
    read_feature_dump,
    vif_descriptor,
    vif_from_magnitudes,
    write_feature_dump,
)
from crashdet.ingest import Frame
from crashdet.tracking import HistoryEntry, Track
from reference import vif_pixelwise


def smooth_texture(shape, seed, blur=5.0):
    rng = np.random.default_rng(seed)
    noise = rng.uniform(0, 1, shape).astype(np.float64)
    img = cv2.GaussianBlur(noise, (0, 0), blur)
    img -= img.min()
    return img / max(img.max(), 1e-12)


def ramp(shift=0.0, size=64):
    xs = np.arange(size, dtype=np.float64)
    return np.tile((xs - shift) / (1.25 * size) + 0.1, (size, 1))


def track_with(boxes, tid=0):
    hist = deque(maxlen=30)
    for i, b in enumerate(boxes):
        hist.append(HistoryEntry.of(i, b))
    return Track(tid, "car", 4.0, hist)


class TestHornSchunck:
    def test_identical_frames_give_zero_flow(self):
        img = smooth_texture((64, 64), 0)
        flow = horn_schunck(img, img, iterations=200)
        assert max(np.abs(flow.u).max(), np.abs(flow.v).max()) <= 1e-8

    def test_ramp_translation(self):
        flow = horn_schunck(ramp(0.0), ramp(1.0), iterations=200, tolerance=0.0)
        assert 0.75 <= flow.u.mean() <= 1.25
        assert np.abs(flow.v).mean() <= 0.25

    def test_textured_translation(self):
        big = smooth_texture((80, 80), 4, blur=4.0)
        flow = horn_schunck(big[8:72, 8:72], big[8:72, 7:71], iterations=200, tolerance=0.0)
        inner = (slice(12, 52), slice(12, 52))
        assert 0.75 <= flow.u[inner].mean() <= 1.25
        assert np.abs(flow.v[inner]).mean() <= 0.25

    def test_zero_iterations(self):
        img = smooth_texture((16, 16), 1)
        flow = horn_schunck(img, np.roll(img, 1, axis=1), iterations=0)
        assert flow.iterations == 0
        assert not flow.u.any() and not flow.v.any()

    def test_shape_mismatch(self):
        with pytest.raises(FlowError):
            horn_schunck(np.zeros((8, 8)), np.zeros((8, 9)))

    def test_field_dimensions(self):
        flow = horn_schunck(np.zeros((10, 14)), np.zeros((10, 14)), iterations=1)
        assert (flow.width, flow.height) == (14, 10)

    def test_early_stop(self):
        img = smooth_texture((32, 32), 2)
        flow = horn_schunck(img, img, iterations=100)
        assert flow.iterations == 1

    @given(st.integers(0, 1000))
    @settings(max_examples=10, deadline=None)
    def test_energy_non_increasing(self, seed):
        a = smooth_texture((32, 32), seed)
        b = smooth_texture((32, 32), seed + 1)
        b = 0.7 * a + 0.3 * b
        energies = [horn_schunck_energy(a, b, horn_schunck(a, b, 0.1, k, 0.0), 0.1) for k in range(51)]
        assert all(e1 <= e0 + 1e-12 * max(1.0, e0) for e0, e1 in zip(energies, energies[1:]))

    @given(st.integers(0, 1000), st.integers(-6, 6), st.integers(-6, 6))
    @settings(max_examples=10, deadline=None)
    def test_shift_equivariant_away_from_border(self, seed, dx, dy):
        iterations = 20
        big = smooth_texture((112, 112), seed, blur=3.0)
        nxt = np.roll(big, (1, 2), axis=(0, 1))
        o = 12
        a0, b0 = big[o:o + 88, o:o + 88], nxt[o:o + 88, o:o + 88]
        a1, b1 = big[o + dy:o + dy + 88, o + dx:o + dx + 88], nxt[o + dy:o + dy + 88, o + dx:o + dx + 88]
        f0 = horn_schunck(a0, b0, 0.1, iterations, 0.0)
        f1 = horn_schunck(a1, b1, 0.1, iterations, 0.0)
        band = iterations + 2
        for g0, g1 in ((f0.u, f1.u), (f0.v, f1.v)):
            inner0 = g0[band + dy:88 - band + dy, band + dx:88 - band + dx]
            inner1 = g1[band:88 - band, band:88 - band]
            assert np.max(np.abs(inner0 - inner1)) <= 1e-6


class TestVif:
    @pytest.fixture
    def crops(self):
        base = smooth_texture((64, 64), 9, blur=3.0)
        return [np.roll(base, (i * i) % 5, axis=1) for i in range(8)]

    def test_static_sequence_fills_last_bin(self):
        img = smooth_texture((64, 64), 0)
        feat = vif_descriptor([img] * 6)
        blocks = feat.values.reshape(16, 20)
        assert np.array_equal(blocks[:, -1], np.ones(16))
        assert not blocks[:, :-1].any()

    def test_length_and_block_sums(self, crops):
        feat = vif_descriptor(crops)
        assert len(feat) == 320
        blocks = feat.values.reshape(16, 20)
        assert np.all(np.abs(blocks.sum(axis=1) - 1.0) <= 1e-9)
        assert np.all((feat.values >= 0) & (feat.values <= 1))

    def test_single_global_jump_three_frames(self):
        # T = 3: one change map, constant nonzero, so B = 1/(T - 2) = 1 everywhere
        mags = [np.full((64, 64), 0.5), np.full((64, 64), 2.0)]
        expected = vif_pixelwise(mags)
        feat = vif_from_magnitudes(mags)
        assert np.array_equal(feat.values, expected)
        assert np.array_equal(feat.values.reshape(16, 20)[:, -1], np.ones(16))

    def test_single_global_jump_longer_sequence(self):
        # the >= rule sets quiet change maps too, so B stays 1 for any T
        mags = [np.full((16, 16), 0.5)] * 3 + [np.full((16, 16), 2.0)] * 3
        feat = vif_from_magnitudes(mags)
        assert np.array_equal(feat.values, vif_pixelwise(mags))
        assert np.array_equal(feat.values.reshape(16, 20)[:, -1], np.ones(16))

    def test_partial_jump(self):
        # jump on the left half only: B = 1 there, (n-1)/n on the right
        n = 4
        a, b = np.full((16, 16), 0.5), np.full((16, 16), 0.5)
        b[:, :8] = 2.0
        mags = [a] * 3 + [b] * 2
        feat = vif_from_magnitudes(mags).values.reshape(4, 4, 20)
        assert np.all(feat[:, :2, -1] == 1.0)
        assert np.all(feat[:, 2:, int((n - 1) / n * 20)] == 1.0)

    @given(st.integers(0, 10_000), st.integers(2, 7))
    @settings(max_examples=25, deadline=None)
    def test_matches_pixelwise_oracle(self, seed, n_maps):
        rng = np.random.default_rng(seed)
        mags = [rng.gamma(2.0, 0.5, (16, 16)) for _ in range(n_maps)]
        # duplicate some maps so zero change maps occur
        if n_maps > 3:
            mags[2] = mags[1]
        assert np.array_equal(vif_from_magnitudes(mags).values, vif_pixelwise(mags))

    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_random_crops_are_valid(self, seed):
        rng = np.random.default_rng(seed)
        crops = [rng.uniform(0, 1, (32, 32)) for _ in range(4)]
        feat = vif_descriptor(crops, FlowParams(iterations=10))
        blocks = feat.values.reshape(16, 20)
        assert np.all(np.isfinite(feat.values))
        assert np.all(np.abs(blocks.sum(axis=1) - 1.0) <= 1e-9)

    def test_brightness_scaling_with_consistent_smoothness(self, crops):
        plain = vif_descriptor(crops, FlowParams(smoothness=0.1))
        scaled = vif_descriptor([2.0 * c for c in crops], FlowParams(smoothness=0.2))
        assert np.max(np.abs(plain.values - scaled.values)) <= 1e-6
        f0 = horn_schunck(crops[0], crops[1], 0.1)
        f1 = horn_schunck(2 * crops[0], 2 * crops[1], 0.2)
        assert np.max(np.abs(f0.u - f1.u)) <= 1e-6

    def test_too_few_crops(self):
        with pytest.raises(FlowError):
            vif_descriptor([np.zeros((8, 8))] * 2)

    def test_mixed_shapes(self):
        with pytest.raises(FlowError):
            vif_descriptor([np.zeros((8, 8)), np.zeros((8, 8)), np.zeros((9, 8))])

    def test_grid_must_divide(self):
        with pytest.raises(FlowError):
            vif_from_magnitudes([np.zeros((10, 10))] * 3, grid=(4, 4))


class TestCrops:
    @pytest.fixture
    def frames(self):
        rng = np.random.default_rng(0)
        return {i: Frame(i, rng.integers(0, 256, (360, 480), dtype=np.uint8)) for i in range(30)}

    def test_thirty_crops(self, frames):
        crops = crop_sequence(track_with([(100 + i, 100, 40, 30) for i in range(30)]), frames)
        assert len(crops) == 30
        assert all(c.shape == (64, 64) for c in crops)
        assert all(0.0 <= c.min() and c.max() <= 1.0 for c in crops)

    def test_edge_box_clamps(self, frames):
        crops = crop_sequence(track_with([(-10, 340, 40, 30)] * 30), frames)
        assert all(c.shape == (64, 64) for c in crops)

    def test_short_history_defers(self, frames):
        with pytest.raises(FlowError, match="defer"):
            crop_sequence(track_with([(100, 100, 40, 30)] * 29), frames)

    def test_missing_frame(self, frames):
        del frames[3]
        with pytest.raises(FlowError, match="buffered"):
            crop_sequence(track_with([(100, 100, 40, 30)] * 30), frames)

    def test_cache_matches_direct_computation(self, frames):
        params = FlowParams(iterations=20, sequence_length=5)
        track = track_with([(100 + 2 * i, 100, 40, 30) for i in range(30)])
        crops = crop_sequence(track, frames, length=5)
        cache = DescriptorCache(params)
        first = cache.descriptor(track, frames)
        again = cache.descriptor(track, frames)
        direct = vif_descriptor(crops, params)
        assert np.array_equal(first.values, direct.values)
        assert np.array_equal(again.values, direct.values)
        cache.forget(100)
        assert not cache._flows


class TestFeatureDump:
    def test_round_trip(self):
        recs = [{"label": 1, "feature": [0.25] * 4, "source": "clip/3"},
                {"label": 0, "feature": [0.0, 1.0, 0.5, 0.5], "source": "clip/4"}]
        buf = io.StringIO()
        write_feature_dump(recs, buf)
        assert read_feature_dump(io.StringIO(buf.getvalue())) == recs

    def test_bad_line(self):
        with pytest.raises(FlowError, match="line 1"):
            read_feature_dump(io.StringIO('{"label": 1}\n'))
