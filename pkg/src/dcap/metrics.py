"""Detection metrics: IoU, greedy matching, 101-point AP, mAP50 / mAP50-95.

Detections and ground truth are grouped per image. A detection is anything
with ``box``, ``score`` and ``class_id`` attributes; ground truth is a list
of ``(class_id, BoxXYXY)`` pairs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FormatError, ReportUndefinedError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # exact i/100; linspace drifts by an ulp
REPORT_FIELDS = ("precision", "recall", "map50", "map50_95", "mean_iou")


class BoxXYXY(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0) * max(self.y2 - self.y1, 0)

    def is_valid(self) -> bool:
        return self.x1 <= self.x2 and self.y1 <= self.y2


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two xyxy boxes; 0 when the union is empty."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = iw * ih if iw > 0 and ih > 0 else 0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass
class MatchResult:
    """Outcome of matching one image's detections at one IoU threshold.

    ``det_tp[i]`` says whether detection i (in the given order) is a true
    positive; ``det_iou[i]`` is its IoU with the matched GT (0 for FPs).
    """

    det_tp: list[bool]
    det_iou: list[float]
    gt_matched: list[bool]

    @property
    def tp(self) -> int:
        return sum(self.det_tp)

    @property
    def fp(self) -> int:
        return len(self.det_tp) - self.tp

    @property
    def fn(self) -> int:
        return len(self.gt_matched) - sum(self.gt_matched)


def match_detections(dets: Sequence, gts: Sequence[tuple[int, Sequence[float]]],
                     iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching; ``dets`` must already be sorted by descending score.

    Each detection takes the unmatched same-class GT with the highest IoU at
    or above the threshold (first GT wins ties).
    """
    used = [False] * len(gts)
    det_tp, det_iou = [], []
    gt_boxes = np.array([g[1] for g in gts], dtype=np.float64).reshape(-1, 4)
    gt_cls = np.array([g[0] for g in gts], dtype=np.int64)
    det_boxes = np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4)
    ious = iou_matrix(det_boxes, gt_boxes)
    for i, d in enumerate(dets):
        best, best_j = -1.0, -1
        for j in range(len(gts)):
            if used[j] or gt_cls[j] != d.class_id:
                continue
            v = ious[i, j]
            if v >= iou_thresh and v > best:
                best, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            det_tp.append(True)
            det_iou.append(float(best))
        else:
            det_tp.append(False)
            det_iou.append(0.0)
    return MatchResult(det_tp, det_iou, used)


def average_precision(tp_sorted: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP from a score-sorted TP/FP sequence.

    Returns NaN when ``n_gt`` is zero (class absent).
    """
    if n_gt == 0:
        return float("nan")
    tp = np.asarray(tp_sorted, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: max precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(interp.mean())


@dataclass
class EvalReport:
    precision: float
    recall: float
    map50: float
    map50_95: float
    mean_iou: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in REPORT_FIELDS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        w.writerow([f"{getattr(self, k):.6f}" for k in REPORT_FIELDS])
        return buf.getvalue()

    def to_table(self) -> str:
        head = "".join(f"{k:>10}" for k in REPORT_FIELDS)
        row = "".join(f"{100 * getattr(self, k):>10.2f}" for k in REPORT_FIELDS)
        lines = [head, row]
        for c, stats in sorted(self.per_class.items()):
            lines.append(f"  class {c}: " + ", ".join(f"{k}={v:.4f}" for k, v in stats.items()))
        return "\n".join(lines) + "\n"


def _sorted_dets(dets):
    # stable: equal scores keep input order
    return sorted(dets, key=lambda d: -d.score)


def evaluate(dets_per_image: Sequence[Sequence], gts_per_image: Sequence[Sequence]) -> EvalReport:
    """Score detections against ground truth over a set of images."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different numbers of images")
    n_gt: dict[int, int] = {}
    for gts in gts_per_image:
        for c, _ in gts:
            n_gt[c] = n_gt.get(c, 0) + 1
    if not n_gt:
        raise ReportUndefinedError("no ground-truth boxes: report is undefined")
    classes = sorted(n_gt)

    # per threshold, per class: list of (score, image index, det index, tp)
    records: dict[float, dict[int, list]] = {t: {c: [] for c in classes} for t in IOU_THRESHOLDS}
    tp_ious: list[float] = []
    for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
        dets = _sorted_dets(dets)
        for t in IOU_THRESHOLDS:
            m = match_detections(dets, gts, t)
            for k, d in enumerate(dets):
                if d.class_id in n_gt:
                    records[t][d.class_id].append((-d.score, img, k, m.det_tp[k]))
            if t == 0.5:
                tp_ious.extend(v for v, ok in zip(m.det_iou, m.det_tp) if ok)

    per_class: dict[int, dict[str, float]] = {}
    for c in classes:
        aps = []
        for t in IOU_THRESHOLDS:
            recs = sorted(records[t][c], key=lambda r: r[:3])
            aps.append(average_precision([r[3] for r in recs], n_gt[c]))
        recs50 = sorted(records[0.5][c], key=lambda r: r[:3])
        p, r = _max_f1_point([x[3] for x in recs50], n_gt[c])
        per_class[c] = {"ap50": aps[0], "ap50_95": float(np.mean(aps)), "precision": p, "recall": r}

    mean = lambda key: float(np.mean([per_class[c][key] for c in classes]))  # noqa: E731
    return EvalReport(
        precision=mean("precision"),
        recall=mean("recall"),
        map50=mean("ap50"),
        map50_95=mean("ap50_95"),
        mean_iou=float(np.mean(tp_ious)) if tp_ious else 0.0,
        per_class=per_class,
    )


def _max_f1_point(tp_sorted: Sequence[bool], n_gt: int) -> tuple[float, float]:
    """Precision and recall at the score cut-off with the highest F1 (first on ties)."""
    if not tp_sorted:
        return 0.0, 0.0
    tp = np.cumsum(np.asarray(tp_sorted, dtype=np.float64))
    precision = tp / np.arange(1, len(tp) + 1)
    recall = tp / n_gt
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    k = int(np.argmax(f1))
    return float(precision[k]), float(recall[k])


def aggregate_runs(reports: Sequence[EvalReport]) -> dict[str, tuple[float, float]]:
    """Per-field sample mean and sample standard deviation (n - 1 denominator)."""
    if len(reports) < 2:
        raise ValueError(f"aggregate_runs needs at least 2 reports, got {len(reports)}")
    out = {}
    for k in REPORT_FIELDS:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std(ddof=1)))
    return out


# -- prediction files ---------------------------------------------------------

@dataclass
class PredictionRecord:
    box: BoxXYXY
    score: float
    class_id: int


def write_predictions(path, dets: Sequence) -> None:
    lines = [f"{d.class_id} {d.score:.6f} {d.box[0]:.3f} {d.box[1]:.3f} {d.box[2]:.3f} {d.box[3]:.3f}"
             for d in dets]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_predictions(path) -> list[PredictionRecord]:
    """Parse ``class score x1 y1 x2 y2`` lines."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise FormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}", line=lineno)
        try:
            cls = int(parts[0])
            score, x1, y1, x2, y2 = (float(p) for p in parts[1:])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}", line=lineno) from None
        if not all(math.isfinite(v) for v in (score, x1, y1, x2, y2)):
            raise FormatError(f"{path}:{lineno}: non-finite value", line=lineno)
        out.append(PredictionRecord(BoxXYXY(x1, y1, x2, y2), score, cls))
    return out
