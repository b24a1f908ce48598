"""IoU, greedy matching, all-point AP, and Gaussian uncertainty metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_detections: List[int] = field(default_factory=list)
    unmatched_ground_truths: List[int] = field(default_factory=list)


@dataclass
class MetricsRow:
    scenario: str
    ap50: float
    ap70: float
    kld: Optional[float] = None
    nll: Optional[float] = None
    coverage: Optional[float] = None
    seed: int = 0

    CSV_HEADER = "scenario,ap50,ap70,kld,nll,coverage,seed"

    def to_csv(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ",".join(
            [self.scenario, fmt(self.ap50), fmt(self.ap70), fmt(self.kld), fmt(self.nll), fmt(self.coverage), str(self.seed)]
        )

    @classmethod
    def from_csv(cls, line: str) -> "MetricsRow":
        parts = line.strip().split(",")
        if len(parts) != 7:
            raise ValueError(f"malformed metrics row: {line!r}")

        def val(s):
            return None if s == "" else float(s)

        return cls(parts[0], float(parts[1]), float(parts[2]), val(parts[3]), val(parts[4]), val(parts[5]), int(parts[6]))


def _check_box(box) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64).reshape(4)
    if not (b[0] < b[2] and b[1] < b[3]):
        raise ValueError(f"degenerate box {b.tolist()}: need min < max on both axes")
    return b


def iou(box_a, box_b) -> float:
    a, b = _check_box(box_a), _check_box(box_b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    iw = np.minimum(dets[:, None, 2], gts[None, :, 2]) - np.maximum(dets[:, None, 0], gts[None, :, 0])
    ih = np.minimum(dets[:, None, 3], gts[None, :, 3]) - np.maximum(dets[:, None, 1], gts[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_d = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    area_g = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    return inter / (area_d[:, None] + area_g[None, :] - inter)


def match(det_boxes, gt_boxes, iou_threshold: float = 0.5) -> MatchResult:
    """Greedy matching; ``det_boxes`` must already be sorted by confidence, descending.

    Each detection claims the unclaimed ground truth of highest IoU at or above
    the threshold; ties go to the lower ground-truth index.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError("iou_threshold must lie in (0, 1]")
    ious = iou_matrix(det_boxes, gt_boxes)
    n_det, n_gt = ious.shape
    claimed = np.zeros(n_gt, dtype=bool)
    result = MatchResult()
    for d in range(n_det):
        cand = np.where(claimed | (ious[d] < iou_threshold), -1.0, ious[d])
        best = int(np.argmax(cand)) if n_gt else -1  # argmax picks the first of tied maxima
        if best < 0 or cand[best] < 0:
            result.unmatched_detections.append(d)
        else:
            claimed[best] = True
            result.pairs.append((d, best, float(ious[d, best])))
    result.unmatched_ground_truths = [g for g in range(n_gt) if not claimed[g]]
    return result


def precision_recall(
    scene_detections: Sequence[Tuple[np.ndarray, np.ndarray]],
    scene_ground_truths: Sequence[np.ndarray],
    iou_threshold: float,
):
    """Pooled PR curve; each scene entry is ``(boxes (n, 4), confidences (n,))``."""
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in scene_ground_truths)
    if n_gt == 0:
        raise UndefinedMetricError("AP is undefined with zero ground truths")
    records = []
    for s, (boxes, conf) in enumerate(scene_detections):
        boxes = np.asarray(boxes).reshape(-1, 4)
        conf = np.asarray(conf, dtype=np.float64).reshape(-1)
        order = np.argsort(-conf, kind="stable")
        m = match(boxes[order], scene_ground_truths[s], iou_threshold)
        tp = np.zeros(len(order), dtype=bool)
        for d, _, _ in m.pairs:
            tp[d] = True
        records.extend(zip(conf[order], tp, [s] * len(order), range(len(order))))
    # global sort by confidence; scene/rank keys keep it deterministic
    records.sort(key=lambda r: (-r[0], r[2], r[3]))
    tp = np.array([r[1] for r in records], dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).tiny)
    return recall, precision


def average_precision(scene_detections, scene_ground_truths, iou_threshold: float = 0.5) -> float:
    """Area under the all-point interpolated precision envelope."""
    recall, precision = precision_recall(scene_detections, scene_ground_truths, iou_threshold)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _pairs(residuals, sigma):
    r = np.asarray(residuals, dtype=np.float64).reshape(-1)
    s = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if r.size == 0:
        raise UndefinedMetricError("no matched pairs")
    if r.shape != s.shape:
        raise ValueError("residuals and sigma must have the same size")
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    return r, s


def kld_metric(residuals, sigma) -> float:
    """Mean of ``r^2 / (2 sigma^2) + ln sigma`` over matched coordinates."""
    r, s = _pairs(residuals, sigma)
    return float(np.mean(r * r / (2 * s * s) + np.log(s)))


def nll_metric(residuals, sigma) -> float:
    """Mean Gaussian negative log-likelihood over matched coordinates."""
    r, s = _pairs(residuals, sigma)
    return float(np.mean(r * r / (2 * s * s) + 0.5 * np.log(2 * np.pi * s * s)))
