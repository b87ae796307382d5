"""Detection post-processing: head decode, class-wise NMS, COCO-style mAP, text records."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import QuantTensor, dequantize

CONF_THRESHOLD = 0.25
IOU_THRESHOLD = 0.45
MAX_DETECTIONS = 300
COCO_IOU_THRESHOLDS = tuple(float(t) for t in np.round(0.5 + 0.05 * np.arange(10), 2))

Box = tuple[float, float, float, float]


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: Box  # x1, y1, x2, y2 in input-image pixels

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 <= x2 and y1 <= y2):
            raise ValueError(f"invalid box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GridMeta:
    """What decode needs to know about the heads: strides, classes, image size."""

    strides: tuple[int, ...]
    num_classes: int
    image_size: int
    one_to_one: bool = False  # NMS-free head: no suppression after decode

    @classmethod
    def from_graph(cls, g) -> "GridMeta":
        return cls(tuple(g.head_strides), g.num_classes, g.input_resolution, g.head_kind == "detect_v10")


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def decode(heads: Sequence[QuantTensor | np.ndarray], meta: GridMeta,
           conf_threshold: float = CONF_THRESHOLD) -> list[Detection]:
    """Per cell: best class, sigmoid score, ltrb distances (in strides) around the cell centre.

    Heads are (1, 4 + num_classes, H, W); int8 heads are dequantized first.
    Output is sorted by descending score, then class, scale and cell order.
    """
    if len(heads) != len(meta.strides):
        raise LayoutError(f"{len(heads)} heads for {len(meta.strides)} strides")
    found = []
    for scale, (head, stride) in enumerate(zip(heads, meta.strides)):
        a = dequantize(head) if isinstance(head, QuantTensor) else np.asarray(head, dtype=np.float64)
        if a.ndim != 4 or a.shape[0] != 1 or a.shape[1] != 4 + meta.num_classes:
            raise LayoutError(f"head {scale}: shape {a.shape} != (1, {4 + meta.num_classes}, H, W)")
        _, _, h, w = a.shape
        if h * stride != meta.image_size or w * stride != meta.image_size:
            raise LayoutError(f"head {scale}: {h}x{w} grid at stride {stride} != image {meta.image_size}")
        logits = a[0, 4:]
        cls = np.argmax(logits, axis=0)
        score = sigmoid(np.take_along_axis(logits, cls[None], axis=0)[0])
        ltrb = np.maximum(a[0, :4], 0.0) * stride
        ys, xs = np.nonzero(score >= conf_threshold)
        for y, x in zip(ys, xs):
            cx, cy = (x + 0.5) * stride, (y + 0.5) * stride
            l, t, r, b = ltrb[:, y, x]
            box = tuple(float(np.clip(v, 0.0, meta.image_size)) for v in (cx - l, cy - t, cx + r, cy + b))
            found.append((-float(score[y, x]), int(cls[y, x]), scale, int(y * w + x), box))
    found.sort(key=lambda f: f[:4])
    return [Detection(c, -s, box) for s, c, _, _, box in found]


def iou(a: Box, b: Box) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _iou_many(box: Box, boxes: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area = (box[2] - box[0]) * (box[3] - box[1])
    union = area + (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def nms(dets: Sequence[Detection], iou_threshold: float = IOU_THRESHOLD) -> list[Detection]:
    """Greedy class-wise NMS.

    Visit order is score descending, then lower class_id, then input order;
    a detection survives iff its IoU with every kept one of its class is
    below the threshold.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].class_id, i))
    kept: dict[int, list[Box]] = {}
    out = []
    for i in order:
        d = dets[i]
        boxes = kept.setdefault(d.class_id, [])
        if boxes and np.any(_iou_many(d.box, np.array(boxes)) >= iou_threshold):
            continue
        boxes.append(d.box)
        out.append(d)
    return out


def postprocess(heads, meta: GridMeta, conf_threshold: float = CONF_THRESHOLD,
                iou_threshold: float = IOU_THRESHOLD, max_det: int = MAX_DETECTIONS) -> list[Detection]:
    """Decode, then NMS unless the head is one-to-one; capped at ``max_det``."""
    dets = decode(heads, meta, conf_threshold)
    if not meta.one_to_one:
        dets = nms(dets, iou_threshold)
    return dets[:max_det]


# ---------------------------------------------------------------------------
# mAP


@dataclass
class MapResult:
    map: float
    per_class: dict[int, float]  # AP averaged over IoU thresholds
    per_threshold: dict[float, float]  # AP averaged over classes


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags already sorted by descending score."""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, np.linspace(0.0, 1.0, 101), side="left")
    reached = idx < tp.size
    return float(np.sum(envelope[idx[reached]]) / 101)


def _match(boxes: list[Box], gts: list[Box], thr: float) -> list[bool]:
    """Each score-ordered prediction takes the unmatched ground truth of highest IoU >= thr."""
    used = [False] * len(gts)
    flags = []
    for box in boxes:
        best, best_iou = -1, thr
        for j, g in enumerate(gts):
            v = iou(box, g)
            if not used[j] and v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def eval_map(preds: Mapping[str, Sequence[Detection]],
             gts: Mapping[str, Sequence[tuple[int, Box]]],
             iou_thresholds: Iterable[float] = COCO_IOU_THRESHOLDS) -> MapResult:
    """COCO-style mAP over classes that have ground truth."""
    thresholds = tuple(iou_thresholds)
    images = sorted(set(gts) | set(preds))
    if not images:
        raise ValueError("eval_map needs at least one image")
    classes = sorted({c for objs in gts.values() for c, _ in objs})
    per_class: dict[int, float] = {}
    per_thr = {t: [] for t in thresholds}
    for c in classes:
        gt_by_img = {im: [tuple(b) for cc, b in gts.get(im, ()) if cc == c] for im in images}
        n_gt = sum(len(v) for v in gt_by_img.values())
        ranked = sorted(
            ((d.score, k, im, i, d.box) for k, im in enumerate(images)
             for i, d in enumerate(preds.get(im, ())) if d.class_id == c),
            key=lambda r: (-r[0], r[1], r[3]))
        rows_by_img: dict[str, list[int]] = {}
        for n, r in enumerate(ranked):
            rows_by_img.setdefault(r[2], []).append(n)
        aps = []
        for t in thresholds:
            tp = np.zeros(len(ranked), dtype=bool)
            for im, rows in rows_by_img.items():
                tp[rows] = _match([ranked[n][4] for n in rows], gt_by_img[im], t)
            ap = average_precision(tp, n_gt)
            aps.append(ap)
            per_thr[t].append(ap)
        per_class[c] = float(np.mean(aps))
    if not classes:
        return MapResult(0.0, {}, {t: 0.0 for t in thresholds})
    return MapResult(float(np.mean(list(per_class.values()))), per_class,
                     {t: float(np.mean(v)) for t, v in per_thr.items()})


# ---------------------------------------------------------------------------
# text records: "image_id class_id [score] x1 y1 x2 y2", one object per line, '#' comments


def format_records(image_id: str, objs, with_score: bool) -> str:
    lines = []
    for o in objs:
        if with_score:
            lines.append(f"{image_id} {o.class_id} {o.score:.6f} " + " ".join(f"{v:.3f}" for v in o.box))
        else:
            cls, box = o
            lines.append(f"{image_id} {cls} " + " ".join(f"{v:.3f}" for v in box))
    return "".join(line + "\n" for line in lines)


def parse_records(text: str, with_score: bool) -> dict[str, list]:
    out: dict[str, list] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != (7 if with_score else 6):
            raise ValueError(f"line {n}: expected {7 if with_score else 6} fields, got {len(parts)}")
        image_id, cls = parts[0], int(parts[1])
        nums = [float(v) for v in parts[2:]]
        if with_score:
            out.setdefault(image_id, []).append(Detection(cls, nums[0], tuple(nums[1:])))
        else:
            out.setdefault(image_id, []).append((cls, tuple(nums)))
    return out


def read_predictions(path) -> dict[str, list[Detection]]:
    """Predictions from one file or every ``*.txt`` file of a directory."""
    path = Path(path)
    files = sorted(path.glob("*.txt")) if path.is_dir() else [path]
    out: dict[str, list[Detection]] = {}
    for f in files:
        for k, v in parse_records(f.read_text(), with_score=True).items():
            out.setdefault(k, []).extend(v)
    return out


def read_ground_truth(path) -> dict[str, list[tuple[int, Box]]]:
    return parse_records(Path(path).read_text(), with_score=False)
