"""Mask and box evaluation: mIoU, oIoU, Prec@X, box accuracy, N-acc."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyEvaluation, ShapeMismatch

PREC_THRESHOLDS = (0.5, 0.7, 0.9)


def tight_box(mask):
    """numpy twin of predictor.box_from_mask: (x0, y0, x1, y1) or None."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    rows = np.where(mask.any(axis=1))[0]
    cols = np.where(mask.any(axis=0))[0]
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


@dataclass
class EvalPair:
    pred_mask: np.ndarray
    gt_mask: np.ndarray
    no_target: bool = False
    empty_decision: Optional[bool] = None
    pred_box: Optional[tuple] = None
    gt_box: Optional[tuple] = None


@dataclass
class MetricReport:
    miou: float
    oiou: float
    prec_at: dict
    rec_acc: float
    n_acc: Optional[float]
    sample_count: int
    per_expression_miou: dict = field(default_factory=dict)

    def lines(self):
        out = [f"samples = {self.sample_count}",
               f"miou = {self.miou:.6f}",
               f"oiou = {self.oiou:.6f}"]
        for t in PREC_THRESHOLDS:
            out.append(f"prec_at_{t} = {self.prec_at[t]:.6f}")
        out.append(f"rec_acc = {self.rec_acc:.6f}")
        if self.n_acc is not None:
            out.append(f"n_acc = {self.n_acc:.6f}")
        for name, value in self.per_expression_miou.items():
            out.append(f"miou_{name} = {value:.6f}")
        return out

    def summary(self):
        extra = "" if self.n_acc is None else f" N-acc {self.n_acc:.4f}"
        return (f"{self.sample_count} samples: mIoU {self.miou:.4f} "
                f"oIoU {self.oiou:.4f} Pr@0.5 {self.prec_at[0.5]:.4f} "
                f"box-acc {self.rec_acc:.4f}{extra}")


def iou(pred_mask, gt_mask):
    """Pixel IoU; 1 when both masks are empty, 0 when exactly one is."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(inter) / float(union)


def box_iou(box_a, box_b):
    """Rectangle IoU on inclusive pixel coordinates (x0, y0, x1, y1)."""
    def area(b):
        return (b[2] - b[0] + 1) * (b[3] - b[1] + 1)

    x0 = max(box_a[0], box_b[0])
    y0 = max(box_a[1], box_b[1])
    x1 = min(box_a[2], box_b[2])
    y1 = min(box_a[3], box_b[3])
    if x1 < x0 or y1 < y0:
        return 0.0
    inter = (x1 - x0 + 1) * (y1 - y0 + 1)
    return inter / float(area(box_a) + area(box_b) - inter)


def aggregate(pairs, include_no_target=False):
    """Fold per-sample results into a MetricReport.

    No-target samples are scored only through N-acc by default; with
    include_no_target=True they enter mIoU/oIoU with the both-empty = 1
    convention.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyEvaluation("no samples to aggregate")

    ious = []
    inter_total = 0
    union_total = 0
    box_hits = []
    nt_total = 0
    nt_correct = 0
    for pair in pairs:
        if pair.no_target:
            nt_total += 1
            if pair.empty_decision:
                nt_correct += 1
            if not include_no_target:
                continue
        pred = np.asarray(pair.pred_mask, dtype=bool)
        gt = np.asarray(pair.gt_mask, dtype=bool)
        ious.append(iou(pred, gt))
        inter_total += int(np.logical_and(pred, gt).sum())
        union_total += int(np.logical_or(pred, gt).sum())

        gt_box = pair.gt_box if pair.gt_box is not None else tight_box(gt)
        if gt_box is not None:
            pred_box = pair.pred_box if pair.pred_box is not None else tight_box(pred)
            hit = pred_box is not None and box_iou(pred_box, gt_box) > 0.5
            box_hits.append(1.0 if hit else 0.0)

    if not ious:
        raise EmptyEvaluation("every sample was excluded from mask scoring")
    miou = float(np.mean(ious))
    oiou = 1.0 if union_total == 0 else inter_total / union_total
    prec = {t: float(np.mean([v > t for v in ious])) for t in PREC_THRESHOLDS}
    rec_acc = float(np.mean(box_hits)) if box_hits else 0.0
    n_acc = nt_correct / nt_total if nt_total else None
    return MetricReport(miou=miou, oiou=oiou, prec_at=prec, rec_acc=rec_acc,
                        n_acc=n_acc, sample_count=len(pairs))


def write_report(report, path, header=None):
    """Key/value report file, one entry per line."""
    with open(path, "w") as fh:
        if header:
            for key, value in header.items():
                fh.write(f"{key} = {value}\n")
        for line in report.lines():
            fh.write(line + "\n")
