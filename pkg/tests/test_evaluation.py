from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crashdet.config import PipelineConfig
from crashdet.errors import CrashDetError
from crashdet.evaluation import (
    Clip,
    balance_classes,
    calibrate,
    clips_from_specs,
    confusion,
    kfold_accuracy,
    metrics,
)
from crashdet.pipeline import run_stream
from crashdet.scenario import build_spec


class TestMetrics:
    def test_confusion_counts(self):
        pairs = [(True, True), (True, False), (False, True), (False, False), (False, False)]
        assert confusion(pairs) == {"tp": 1, "fn": 1, "fp": 1, "tn": 2}

    def test_values(self):
        m = metrics({"tp": 46, "fn": 4, "fp": 5, "tn": 45})
        assert m["accuracy"] == pytest.approx(0.91)
        assert m["recall"] == pytest.approx(0.92)
        assert m["false_alarm_rate"] == pytest.approx(0.10)
        assert m["f1"] == pytest.approx(2 * 0.92 * (46 / 51) / (0.92 + 46 / 51))

    def test_undefined_recall(self):
        assert metrics({"tp": 0, "fn": 0, "fp": 1, "tn": 3})["recall"] is None

    def test_empty(self):
        with pytest.raises(CrashDetError):
            metrics({"tp": 0, "fn": 0, "fp": 0, "tn": 0})

    @given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50))
    def test_identities(self, pairs):
        c = confusion(pairs)
        m = metrics(c)
        assert all(v >= 0 for v in c.values())
        assert m["accuracy"] == pytest.approx((c["tp"] + c["tn"]) / len(pairs))
        if c["tp"] + c["fn"]:
            assert m["recall"] == pytest.approx(c["tp"] / (c["tp"] + c["fn"]))


class TestBalance:
    def test_minority_repeated(self):
        y = np.array([1] * 3 + [-1] * 10)
        idx = balance_classes(np.arange(13), y)
        assert np.sum(y[idx] == 1) == 9 and np.sum(y[idx] == -1) == 10

    def test_already_even(self):
        y = np.array([1, -1, 1, -1])
        assert np.array_equal(balance_classes(np.arange(4), y), np.arange(4))

    def test_single_class_untouched(self):
        y = np.array([1, 1])
        assert np.array_equal(balance_classes(np.arange(2), y), np.arange(2))

    @given(st.integers(1, 40), st.integers(1, 40))
    def test_ratio_close_to_one(self, n_pos, n_neg):
        y = np.array([1] * n_pos + [-1] * n_neg)
        idx = balance_classes(np.arange(len(y)), y)
        p, n = np.sum(y[idx] == 1), np.sum(y[idx] == -1)
        small = min(n_pos, n_neg)
        assert set(np.unique(idx)) == set(range(len(y)))
        # whole copies leave at most half a minority block of imbalance
        assert abs(p - n) <= small / 2
        assert min(p, n) >= min(n_pos, n_neg)

    def test_kfold_separable(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(2, 0.2, (15, 3)), rng.normal(-2, 0.2, (45, 3))])
        y = np.array([1] * 15 + [-1] * 45)
        scores = kfold_accuracy(X, y, k=5, epochs=20, balance=True)
        assert len(scores) == 5 and min(scores) == 1.0


@pytest.fixture(scope="module")
def clips():
    specs = [build_spec("head_on", 3, 75.0, 1.0, 2), build_spec("near_miss_brake", 4, 45.0, 1.0, 6)]
    return list(clips_from_specs(specs))


class TestCalibration:
    def test_replay_matches_full_pipeline(self, clips):
        cfg = PipelineConfig()
        report = calibrate(clips, cfg, speed_limits=(cfg.collision.speed_limit, 1000.0),
                           min_speeds=(cfg.tracker.min_speed,))
        rows = {r["speed_limit"]: r for r in report["grid"]}
        expected = [(c.label, bool(run_stream(c.frames, c.detections, cfg)[0].events)) for c in clips]
        assert rows[cfg.collision.speed_limit]["confusion"] == confusion(expected)
        # a speed limit nobody reaches confirms nothing
        assert rows[1000.0]["confusion"]["tp"] == rows[1000.0]["confusion"]["fp"] == 0

    def test_best_is_in_grid(self, clips):
        report = calibrate(clips[:1], PipelineConfig(), speed_limits=(20, 40), min_speeds=(5,))
        assert (report["best"]["speed_limit"], report["best"]["min_speed"]) in {(20, 5), (40, 5)}
        assert len(report["grid"]) == 2


def test_clip_dataclass_label():
    clip = Clip("x", [], {}, True)
    assert clip.label and clip.truth is None
