"""Single-class detection metrics: IoU, greedy matching, precision/recall and AP."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class SchemaError(ValueError):
    """Detection/ground-truth JSON does not follow the expected layout."""


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    labels: List[bool]  # per detection, in input order
    order: List[int]  # detection indices by descending score


@dataclass
class PrecisionRecall:
    precision: float
    recall: float
    precision_degenerate: bool = False
    recall_degenerate: bool = False


@dataclass
class EvalReport:
    precision: float
    recall: float
    ap_50: float
    ap_50_95: float
    per_threshold: List[Tuple[float, float]] = field(default_factory=list)
    iou_threshold: float = 0.5
    conf_threshold: float = 0.0
    precision_degenerate: bool = False
    recall_degenerate: bool = False

    def to_json(self) -> str:
        """JSON text with every real value written with 6 fixed decimals."""
        f = lambda v: f"{v:.6f}"  # noqa: E731
        rows = ", ".join(f'{{"iou": {f(t)}, "ap": {f(a)}}}' for t, a in self.per_threshold)
        return (
            "{\n"
            f'  "precision": {f(self.precision)},\n'
            f'  "recall": {f(self.recall)},\n'
            f'  "precision_degenerate": {json.dumps(self.precision_degenerate)},\n'
            f'  "recall_degenerate": {json.dumps(self.recall_degenerate)},\n'
            f'  "iou_threshold": {f(self.iou_threshold)},\n'
            f'  "conf_threshold": {f(self.conf_threshold)},\n'
            f'  "ap_50": {f(self.ap_50)},\n'
            f'  "ap_50_95": {f(self.ap_50_95)},\n'
            f'  "per_threshold": [{rows}]\n'
            "}\n"
        )


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _ranking(dets: Sequence[DetectionRecord]) -> List[int]:
    # stable sort keeps input order among equal scores
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_greedy(dets: Sequence[DetectionRecord], gts: Mapping[str, Sequence[Box]],
                 thr: float) -> MatchResult:
    """Match detections to ground truth in descending score order.

    Each detection takes the still-unmatched ground-truth box of its image with
    the highest IoU, provided that IoU is at least ``thr``.
    """
    if not 0.0 < thr <= 1.0:
        raise ValueError(f"IoU threshold {thr} outside (0, 1]")
    order = _ranking(dets)
    taken = {img: [False] * len(boxes) for img, boxes in gts.items()}
    labels = [False] * len(dets)
    for i in order:
        d = dets[i]
        boxes = gts.get(d.image_id, ())
        best, best_iou = -1, thr
        for j, g in enumerate(boxes):
            if taken[d.image_id][j]:
                continue
            v = iou(d.box, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            taken[d.image_id][best] = True
            labels[i] = True
    tp = sum(labels)
    n_gt = sum(len(b) for b in gts.values())
    return MatchResult(tp=tp, fp=len(dets) - tp, fn=n_gt - tp, labels=labels, order=order)


def precision_recall(tp: int, fp: int, fn: int) -> PrecisionRecall:
    """Precision TP/(TP+FP) and recall TP/(TP+FN); 0/0 yields 0 with a flag."""
    p_den, r_den = tp + fp, tp + fn
    return PrecisionRecall(
        precision=tp / p_den if p_den else 0.0,
        recall=tp / r_den if r_den else 0.0,
        precision_degenerate=p_den == 0,
        recall_degenerate=r_den == 0,
    )


def pr_curve(dets: Sequence[DetectionRecord], gts: Mapping[str, Sequence[Box]],
             thr: float) -> Tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) after each detection in score order."""
    n_gt = sum(len(b) for b in gts.values())
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")
    m = match_greedy(dets, gts, thr)
    hits = np.array([m.labels[i] for i in m.order], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).tiny)
    return recall, precision


def average_precision(dets: Sequence[DetectionRecord], gts: Mapping[str, Sequence[Box]],
                      thr: float = 0.5, method: str = "interp101") -> float:
    """Area under the precision-recall curve.

    ``interp101`` averages the precision envelope sampled at recall
    0.00, 0.01, ..., 1.00; ``area`` integrates the envelope exactly.
    """
    if method not in ("interp101", "area"):
        raise ValueError(f"unknown AP method {method!r}")
    recall, precision = pr_curve(dets, gts, thr)
    if recall.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if method == "interp101":
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
        return float(sampled.mean())
    r = np.concatenate([[0.0], recall])
    return float(np.sum((r[1:] - r[:-1]) * envelope))


def ap_range(dets: Sequence[DetectionRecord], gts: Mapping[str, Sequence[Box]],
             iou_thr: float = 0.5, conf: float = 0.0, method: str = "interp101") -> EvalReport:
    """AP at IoU 0.50:0.05:0.95 plus precision/recall at ``iou_thr`` and ``conf``."""
    per = [(t, average_precision(dets, gts, t, method)) for t in IOU_THRESHOLDS]
    kept = [d for d in dets if d.score >= conf]
    m = match_greedy(kept, gts, iou_thr)
    pr = precision_recall(m.tp, m.fp, m.fn)
    return EvalReport(
        precision=pr.precision, recall=pr.recall,
        ap_50=per[0][1], ap_50_95=float(np.mean([a for _, a in per])),
        per_threshold=per, iou_threshold=iou_thr, conf_threshold=conf,
        precision_degenerate=pr.precision_degenerate, recall_degenerate=pr.recall_degenerate,
    )


# -- JSON ------------------------------------------------------------------
def _coords(row, n: int, where: str) -> List[float]:
    if not isinstance(row, list) or len(row) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row):
        raise SchemaError(f"{where}: expected a list of {n} numbers, got {row!r}")
    return [float(v) for v in row]


def parse_eval_json(doc) -> Tuple[List[DetectionRecord], Dict[str, List[Box]]]:
    """Parse ``{"images": [{"id", "gt": [[x1,y1,x2,y2]...], "det": [[x1,y1,x2,y2,s]...]}]}``."""
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise SchemaError('top level must be an object with an "images" list')
    dets: List[DetectionRecord] = []
    gts: Dict[str, List[Box]] = {}
    for k, img in enumerate(doc["images"]):
        if not isinstance(img, dict) or not isinstance(img.get("id"), str):
            raise SchemaError(f"images[{k}] needs a string id")
        image_id = img["id"]
        if image_id in gts:
            raise SchemaError(f"duplicate image id {image_id!r}")
        try:
            gts[image_id] = [Box(*_coords(r, 4, f"images[{k}].gt[{j}]")) for j, r in enumerate(img.get("gt", []))]
            for j, r in enumerate(img.get("det", [])):
                x1, y1, x2, y2, s = _coords(r, 5, f"images[{k}].det[{j}]")
                dets.append(DetectionRecord(image_id, Box(x1, y1, x2, y2), s))
        except SchemaError:
            raise
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"images[{k}]: {exc}") from exc
    return dets, gts


def dump_eval_json(dets: Sequence[DetectionRecord], gts: Mapping[str, Sequence[Box]]) -> dict:
    ids = list(gts) + [d.image_id for d in dets if d.image_id not in gts]
    images = []
    for image_id in dict.fromkeys(ids):
        images.append({
            "id": image_id,
            "gt": [b.as_list() for b in gts.get(image_id, [])],
            "det": [d.box.as_list() + [d.score] for d in dets if d.image_id == image_id],
        })
    return {"images": images}


def merge_pred_gt(pred_doc, gt_doc) -> Tuple[List[DetectionRecord], Dict[str, List[Box]]]:
    dets, _ = parse_eval_json(pred_doc)
    _, gts = parse_eval_json(gt_doc)
    for d in dets:
        gts.setdefault(d.image_id, [])
    return dets, gts


def pr_curve_csv(dets, gts) -> str:
    lines = ["iou,recall,precision"]
    for t in IOU_THRESHOLDS:
        recall, precision = pr_curve(dets, gts, t)
        lines += [f"{t:.2f},{r:.9g},{p:.9g}" for r, p in zip(recall, precision)]
    return "\n".join(lines) + "\n"
