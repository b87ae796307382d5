"""
Decoding, NMS and mAP
=====================

Turn raw head tensors into boxes, suppress overlaps per class, and score a
small hand-built corpus with COCO-style mAP.
"""

from pathlib import Path

import numpy as np

from tyrt.detect import Detection, GridMeta, decode, eval_map, nms, read_ground_truth, read_predictions

# two heads for a 64x64 input, three classes, everything strongly negative
meta = GridMeta(strides=(16, 32), num_classes=3, image_size=64)
heads = [np.full((1, 7, 4, 4), -8.0), np.full((1, 7, 2, 2), -8.0)]
heads[0][0, :4, 1, 2] = 1.0  # one stride to each side of the cell centre
heads[0][0, 6, 1, 2] = 4.0  # class 2
print(decode(heads, meta))

# class-wise greedy NMS
dets = [Detection(0, 0.9, (0, 0, 10, 10)), Detection(0, 0.8, (1, 1, 10, 10)), Detection(1, 0.7, (0, 0, 10, 10))]
print(nms(dets, 0.45))

corpus = Path(__file__).resolve().parents[1] / "tests" / "data" / "corpus"
r = eval_map(read_predictions(corpus / "predictions.txt"), read_ground_truth(corpus / "ground_truth.txt"))
print(f"mAP {r.map:.4f}", {c: round(v, 4) for c, v in r.per_class.items()})
