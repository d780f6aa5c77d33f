import math

import numpy as np
import pytest
import torch

from oracles import confusion_loops, set_iou
from palseg.metrics import ConfusionMatrix, benchmark, iou


class TestConfusion:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        gt = rng.choice([0, 1, 2, 3, 255], size=(17, 23))
        pred = rng.integers(0, 4, size=(17, 23))
        cm = ConfusionMatrix(4).update(pred, gt)
        np.testing.assert_array_equal(cm.counts, confusion_loops(pred, gt, 4, ignore=255))

    def test_accepts_tensors(self):
        gt = torch.tensor([[0, 1], [2, 255]])
        pred = torch.tensor([[0, 2], [2, 1]])
        cm = ConfusionMatrix(3).update(pred, gt)
        assert cm.total == 3
        assert cm.counts[1, 2] == 1

    def test_out_of_range_prediction(self):
        with pytest.raises(ValueError, match="prediction class 5"):
            ConfusionMatrix(3).update(np.array([5]), np.array([0]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="differ in shape"):
            ConfusionMatrix(3).update(np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_merge_equals_joint_update(self):
        rng = np.random.default_rng(1)
        a, b = rng.integers(0, 3, (2, 10, 10)), rng.integers(0, 3, (2, 10, 10))
        split = ConfusionMatrix(3).update(a[0], b[0]).merge(ConfusionMatrix(3).update(a[1], b[1]))
        joint = ConfusionMatrix(3).update(a, b)
        np.testing.assert_array_equal(split.counts, joint.counts)


class TestIou:
    def test_set_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            pred, gt = rng.integers(0, 3, (2, 16, 16))
            rep = iou(ConfusionMatrix(3).update(pred, gt))
            for c in range(3):
                assert rep.per_class[c] == set_iou(pred, gt, c)

    def test_absent_class_excluded_from_mean(self):
        gt = np.array([0, 0, 1, 1])
        pred = np.array([0, 1, 1, 1])
        rep = iou(ConfusionMatrix(3).update(pred, gt), ["a", "b", "c"])
        assert rep.per_class[2] is None
        assert rep.undefined == ["c"]
        assert rep.mean_iou == pytest.approx((0.5 + 2 / 3) / 2)

    def test_empty_matrix(self):
        rep = iou(ConfusionMatrix(2))
        assert math.isnan(rep.mean_iou) and math.isnan(rep.pixel_accuracy)

    def test_table_row_format(self):
        # counts chosen so the IoUs come out at 67.67, 99.06 and 92.16 percent
        counts = np.array([[6767, 0, 3233], [0, 118872, 1128], [0, 0, 51264]])
        rep = iou(ConfusionMatrix(3, counts), ["track", "field", "others"])
        assert rep.format_row("ours") == "ours | 67.67% | 99.06% | 92.16% | 86.30%"

    def test_report_dict(self):
        rep = iou(ConfusionMatrix(2).update(np.array([0, 1]), np.array([0, 0])), ["x", "y"])
        d = rep.to_dict()
        assert d["per_class"] == {"x": 0.5, "y": 0.0}
        assert d["pixel_accuracy"] == 0.5 and d["num_pixels"] == 2


class TestBenchmark:
    def test_report_fields(self, tiny_model):
        res = benchmark(tiny_model, (1, 3, 64, 64), warmup=1, runs=4)
        assert res["runs"] == 4 and len(res["samples_ms"]) == 4
        assert res["fps"] == pytest.approx(1e3 / res["latency_ms"]["mean"])
        assert res["latency_ms"]["min"] <= res["latency_ms"]["p50"] <= max(res["samples_ms"])
        assert res["device"].startswith("cpu")

    def test_bad_shape_reported(self, tiny_model):
        with pytest.raises(RuntimeError, match=r"input shape \(1, 3, 70, 64\)"):
            benchmark(tiny_model, (1, 3, 70, 64), warmup=0, runs=1)

    def test_runs_positive(self, tiny_model):
        with pytest.raises(ValueError):
            benchmark(tiny_model, (1, 3, 64, 64), runs=0)
