import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tyrt.netzoo import forward_all, forward_float
from tyrt.netzoo.weights import WeightStore
from tyrt.quantizer import (
    CalibrationError, CalibStats, calibrate, collect_stats, format_calibration_report, ptq, quant_error,
)
from tyrt.tensor import dequantize, quantize

from .toys import toy_graph, uniform_weights

finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestCalibStats:
    def test_symmetric_unit_range(self):
        q = CalibStats().update(np.array([-1.0, 1.0])).qparams()
        assert q.scale == pytest.approx(2 / 255)
        assert q.zero_point == -1  # round(-128 + 127.5) rounds half away from zero

    def test_constant_zero_fallback(self):
        q = CalibStats().update(np.zeros(10)).qparams()
        assert q.scale == pytest.approx(1 / 255) and q.zero_point == -128

    def test_positive_range_includes_zero(self):
        q = CalibStats().update(np.array([2.0, 3.0])).qparams()
        assert q.zero_point == -128 and q.scale == pytest.approx(3 / 255)

    def test_unused_stats_rejected(self):
        with pytest.raises(CalibrationError):
            CalibStats().qparams()

    @settings(max_examples=200, deadline=None)
    @given(st.lists(finite, min_size=1, max_size=20))
    def test_qparams_always_valid(self, xs):
        q = CalibStats().update(np.array(xs)).qparams()
        assert q.scale > 0 and -128 <= q.zero_point <= 127
        assert q.real_min <= min(min(xs), 0) + q.scale and q.real_max >= max(max(xs), 0) - q.scale

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(finite, min_size=1, max_size=5), min_size=2, max_size=6))
    def test_more_samples_only_widen(self, batches):
        s = CalibStats()
        prev = None
        for b in batches:
            s.update(np.array(b))
            if prev is not None:
                assert s.min <= prev[0] and s.max >= prev[1]
            prev = (s.min, s.max)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(finite, min_size=1), st.lists(finite, min_size=1), st.lists(finite, min_size=1))
    def test_merge_associative(self, a, b, c):
        sa, sb, sc = (CalibStats().update(np.array(x)) for x in (a, b, c))
        left, right = sa.merge(sb).merge(sc), sa.merge(sb.merge(sc))
        assert (left.min, left.max, left.count) == (right.min, right.max, right.count)


class TestCalibrate:
    def test_repeated_image_idempotent(self):
        g = toy_graph()
        ws = uniform_weights(g)
        x = np.random.default_rng(0).random((1, 3, 16, 16))
        assert calibrate(g, ws, [x]) == calibrate(g, ws, [x] * 10)

    def test_empty_set(self):
        g = toy_graph()
        with pytest.raises(CalibrationError):
            calibrate(g, uniform_weights(g), [])

    def test_requires_float_weights(self):
        with pytest.raises(CalibrationError):
            calibrate(toy_graph(), WeightStore(), [np.zeros((1, 3, 16, 16))])

    def test_ranges_cover_observed(self):
        g = toy_graph(hidden=(8, 8))
        ws = uniform_weights(g)
        imgs = [np.random.default_rng(i).random((1, 3, 16, 16)) for i in range(3)]
        qp = calibrate(g, ws, imgs)
        for x in imgs:
            for name, arr in forward_float(g, ws, x).items():
                # zero-point rounding can shift the grid by up to half a step
                tol = qp[name].scale / 2 + 1e-9
                assert qp[name].real_min <= arr.min() + tol and arr.max() <= qp[name].real_max + tol

    def test_weights_symmetric_int8(self, v8_small):
        _, ws, _ = v8_small
        for qc in ws.quant.values():
            assert qc.weight_qparams.zero_point == 0
            assert qc.weights.dtype == np.int8 and qc.weights.min() >= -127
            assert qc.bias.dtype == np.int32


class TestQuantError:
    def test_identity_layer_within_half_step(self):
        g = toy_graph(hidden=(), num_classes=1)
        ws = WeightStore()
        w = np.zeros((5, 3, 1, 1))
        for i in range(3):
            w[i, i] = 1.0
        ws.float_weights["head"] = (w, np.zeros(5))
        x = np.random.default_rng(0).random((1, 3, 16, 16))
        qws = ptq(g, ws, [x])
        err = quant_error(g, qws, [x])
        assert err["head"].max_abs <= qws.tensor_qparams["head"].scale / 2 + 1e-12

    def test_metrics_non_negative_and_recomputed(self, v13_small):
        g, ws, images = v13_small
        err = quant_error(g, ws, images)
        sq, n = {}, {}
        for x in images:
            ref = forward_float(g, ws, x)
            for name, t in forward_all(g, ws, quantize(x, ws.tensor_qparams["input"])).items():
                d = dequantize(t) - ref[name]
                sq[name] = sq.get(name, 0.0) + float((d ** 2).sum())
                n[name] = n.get(name, 0) + d.size
        for name, e in err.items():
            assert e.max_abs >= 0 and e.rmse >= 0
            assert e.rmse == pytest.approx(np.sqrt(sq[name] / n[name]), rel=1e-9, abs=1e-15)

    def test_three_layer_toy_head_rmse(self):
        g = toy_graph(hidden=(8, 8))
        ws = uniform_weights(g, seed=3)
        rng = np.random.default_rng(3)
        imgs = [rng.random((1, 3, 16, 16)) for _ in range(4)]
        qws = ptq(g, ws, imgs)
        assert quant_error(g, qws, imgs)["head"].rmse_steps <= 3.0

    def test_report_lists_tensors(self, v13_small):
        g, ws, images = v13_small
        text = format_calibration_report(g, ws, quant_error(g, ws, images[:1]))
        assert all(l.name in text for l in g.layers)
        assert "rmse" in text.splitlines()[0]


def test_collect_stats_counts_images():
    g = toy_graph()
    stats = collect_stats(g, uniform_weights(g), [np.zeros((1, 3, 16, 16))] * 3)
    assert stats["head"].count == 3
