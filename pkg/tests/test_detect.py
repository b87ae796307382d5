from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tyrt.detect import (
    COCO_IOU_THRESHOLDS, Detection, GridMeta, LayoutError, average_precision, decode, eval_map, format_records,
    iou, nms, parse_records, postprocess, read_ground_truth, read_predictions, sigmoid,
)
from tyrt.netzoo import forward
from tyrt.tensor import QParams, quantize

from .oracles import box_iou, brute_force_nms

CORPUS = Path(__file__).parent / "data" / "corpus"
# class 0: AP 1 at the 7 thresholds up to 0.80, 51/101 above; class 1: 51/101 everywhere
CORPUS_MAP = ((7 + 3 * 51 / 101) / 10 + 51 / 101) / 2
META = GridMeta((16, 32), 3, 64)


def empty_heads(nc=3, fill=-10.0):
    return [np.full((1, 4 + nc, 4, 4), fill), np.full((1, 4 + nc, 2, 2), fill)]


def random_dets(rng, n, classes=3):
    out = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 50, 2)
        w, h = rng.uniform(1, 20, 2)
        score = float(rng.choice([0.3, 0.5, 0.7, 0.9])) if rng.random() < 0.3 else float(rng.random())
        out.append(Detection(int(rng.integers(classes)), score, (x1, y1, x1 + w, y1 + h)))
    return out


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 30), st.floats(0.1, 30)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


class TestDecode:
    def test_all_negative_logits(self):
        assert decode(empty_heads(), META) == []

    def test_single_cell(self):
        heads = empty_heads()
        heads[0][0, :4, 1, 2] = 1.0  # one stride each side
        heads[0][0, 4 + 2, 1, 2] = 5.0
        (d,) = decode(heads, META)
        assert d.class_id == 2
        assert d.score == pytest.approx(1 / (1 + np.exp(-5.0)))
        assert d.box == pytest.approx((24.0, 8.0, 56.0, 40.0))  # centred on (40, 24)

    def test_threshold_inclusive(self):
        heads = empty_heads()
        heads[1][0, 4, 0, 0] = 0.0
        assert len(decode(heads, META, conf_threshold=0.5)) == 1
        assert decode(heads, META, conf_threshold=0.51) == []

    def test_boxes_clipped(self):
        heads = empty_heads()
        heads[1][0, :4, 0, 0] = 10.0
        heads[1][0, 4, 0, 0] = 3.0
        assert decode(heads, META)[0].box == (0.0, 0.0, 64.0, 64.0)

    def test_layout_errors(self):
        with pytest.raises(LayoutError):
            decode(empty_heads()[:1], META)
        with pytest.raises(LayoutError):
            decode(empty_heads(nc=4), META)
        with pytest.raises(LayoutError):
            decode([np.zeros((1, 7, 3, 3)), np.zeros((1, 7, 2, 2))], META)

    def test_quantized_heads_bit_identical(self, v8_small):
        g, ws, images = v8_small
        heads = forward(g, ws, quantize(images[0], ws.tensor_qparams["input"]))
        meta = GridMeta.from_graph(g)
        a = decode(heads, meta, 0.0)
        assert a == decode(heads, meta, 0.0) and len(a) == 8 * 8 + 4 * 4

    def test_v10_one_per_cell_no_nms(self):
        meta = GridMeta((16, 32), 3, 64, one_to_one=True)
        heads = empty_heads(fill=3.0)
        out = postprocess(heads, meta)
        assert len(out) == 16 + 4  # one detection per cell, overlaps not suppressed

    def test_sigmoid_stable(self):
        assert sigmoid(np.array([-1000.0, 0.0, 1000.0])).tolist() == [0.0, 0.5, 1.0]


class TestIou:
    def test_examples(self):
        assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
        assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)

    @settings(max_examples=300, deadline=None)
    @given(boxes, boxes)
    def test_symmetric_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a) and 0.0 <= v <= 1.0
        assert v == pytest.approx(box_iou(a, b))
        assert iou(a, a) == pytest.approx(1.0)


class TestNms:
    def test_same_class_suppressed(self):
        a = Detection(0, 0.9, (0, 0, 10, 10))
        assert nms([Detection(0, 0.8, (0, 0, 10, 10)), a], 0.5) == [a]

    def test_different_classes_kept(self):
        dets = [Detection(0, 0.9, (0, 0, 10, 10)), Detection(1, 0.8, (0, 0, 10, 10))]
        assert nms(dets, 0.5) == dets

    def test_tie_break(self):
        a, b = Detection(1, 0.5, (0, 0, 10, 10)), Detection(0, 0.5, (0, 0, 10, 10))
        c = Detection(0, 0.5, (0, 0, 10, 9.9))
        assert nms([a, c, b], 0.5) == [c, a]  # class 0 first, then insertion order within class

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            dets = random_dets(rng, int(rng.integers(0, 51)))
            thr = float(rng.choice([0.3, 0.45, 0.5, 0.7]))
            assert nms(dets, thr) == brute_force_nms(dets, thr)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.floats(0, 1), boxes), max_size=30), st.floats(0.1, 0.9))
    def test_properties(self, raw, thr):
        dets = [Detection(c, s, b) for c, s, b in raw]
        kept = nms(dets, thr)
        assert all(k in dets for k in kept)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) < thr
        assert nms(kept, thr) == kept

    def test_postprocess_caps(self):
        heads = empty_heads(fill=3.0)
        assert len(postprocess(heads, GridMeta((16, 32), 3, 64, True), max_det=5)) == 5


class TestMap:
    def test_perfect(self):
        gts = {"a": [(0, (0, 0, 10, 10)), (1, (5, 5, 20, 20))], "b": [(0, (1, 1, 4, 4))]}
        preds = {k: [Detection(c, 1.0, b) for c, b in v] for k, v in gts.items()}
        r = eval_map(preds, gts)
        assert r.map == 1.0 and all(v == 1.0 for v in r.per_threshold.values())

    def test_no_predictions(self):
        assert eval_map({}, {"a": [(0, (0, 0, 10, 10))]}).map == 0.0

    def test_needs_an_image(self):
        with pytest.raises(ValueError):
            eval_map({}, {})

    def test_tp_then_fp_at_iou_06(self):
        gts = {"a": [(0, (0, 0, 10, 10))]}
        preds = {"a": [Detection(0, 0.9, (0, 0, 10, 6)), Detection(0, 0.8, (30, 30, 40, 40))]}
        r = eval_map(preds, gts)
        assert r.per_threshold[0.5] == 1.0 and r.per_threshold[0.95] == 0.0
        assert r.map == pytest.approx(0.3, abs=1e-6)  # matched at 0.50, 0.55, 0.60 only

    def test_interpolated_curve(self):
        # TP, FP, TP over 2 GT: recall 0.5 at precision 1 then recall 1 at precision 2/3
        gts = {"a": [(0, (0, 0, 10, 10)), (0, (20, 20, 30, 30))]}
        preds = {"a": [Detection(0, 0.9, (0, 0, 10, 10)), Detection(0, 0.8, (50, 50, 60, 60)),
                       Detection(0, 0.7, (20, 20, 30, 30))]}
        r = eval_map(preds, gts, [0.5])
        assert r.map == pytest.approx((51 + 50 * 2 / 3) / 101, abs=1e-6)

    def test_average_precision_direct(self):
        assert average_precision(np.array([True]), 1) == 1.0
        assert average_precision(np.array([False, True]), 1) == pytest.approx(0.5)
        assert average_precision(np.array([]), 3) == 0.0

    def test_corpus(self):
        r = eval_map(read_predictions(CORPUS / "predictions.txt"), read_ground_truth(CORPUS / "ground_truth.txt"))
        assert r.map == pytest.approx(CORPUS_MAP, abs=1e-6)
        assert r.per_class[1] == pytest.approx(51 / 101, abs=1e-6)

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        gts = {f"i{k}": [(int(rng.integers(2)), d.box) for d in random_dets(rng, 4)] for k in range(4)}
        preds = {}
        for k, objs in gts.items():
            jittered = [Detection(c, float(rng.random()), tuple(v + rng.normal(0, 1) for v in b)) for c, b in objs]
            preds[k] = [Detection(d.class_id, d.score, (min(d.box[0], d.box[2]), min(d.box[1], d.box[3]),
                                                        max(d.box[0], d.box[2]), max(d.box[1], d.box[3])))
                        for d in jittered + random_dets(rng, 3, classes=2)]
        base = eval_map(preds, gts).map
        shuffled = {k: [v[i] for i in rng.permutation(len(v))] for k, v in reversed(list(preds.items()))}
        assert eval_map(shuffled, gts).map == pytest.approx(base, abs=1e-12)

    def test_default_thresholds(self):
        assert COCO_IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


class TestRecords:
    def test_roundtrip(self):
        dets = [Detection(3, 0.5, (1.0, 2.0, 3.5, 4.25))]
        assert parse_records(format_records("x", dets, True), True) == {"x": dets}
        gt = [(1, (0.0, 0.0, 5.0, 5.0))]
        assert parse_records(format_records("y", gt, False), False) == {"y": gt}

    def test_bad_line(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_records("a 0 1 2 3 4\na 0 1 2\n", False)

    def test_directory_of_predictions(self, tmp_path):
        (tmp_path / "a.txt").write_text("a 0 0.5 0 0 1 1\n")
        (tmp_path / "b.txt").write_text("b 1 0.6 0 0 2 2\n")
        assert sorted(read_predictions(tmp_path)) == ["a", "b"]

    def test_detection_validation(self):
        with pytest.raises(ValueError):
            Detection(0, 1.5, (0, 0, 1, 1))
        with pytest.raises(ValueError):
            Detection(0, 0.5, (2, 0, 1, 1))


def test_quantized_head_decode_matches_float_path():
    q = QParams(0.1, 0)
    heads = empty_heads(fill=-5.0)
    heads[0][0, 4, 0, 0] = 2.0
    heads[0][0, :4, 0, 0] = 0.5
    qheads = [quantize(h, q) for h in heads]
    assert decode(qheads, META) == decode(heads, META)
