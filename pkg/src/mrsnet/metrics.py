"""Referring-segmentation evaluation: per-sample IoU and dataset aggregates.

Non-object convention: a sample whose ground truth and prediction are both
empty counts as IoU 1.0 (correct abstention) and is excluded from the oIoU
sums, since 0/0 contributes nothing to a cumulative ratio.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLDS = (0.7, 0.8, 0.9)


@dataclass
class EvalRecord:
    sample_id: str
    intersection: int
    union: int
    iou: float
    annotation_type: str = "single"


def sample_iou(pred, gt, sample_id="", annotation_type="single"):
    """Intersection-over-union of two binary masks as an EvalRecord."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    intersection = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    iou = 1.0 if union == 0 else intersection / union
    return EvalRecord(
        sample_id=sample_id,
        intersection=intersection,
        union=union,
        iou=iou,
        annotation_type=annotation_type,
    )


def aggregate(records, thresholds=DEFAULT_THRESHOLDS):
    """Reduce per-sample records to the standard report.

    Returns a dict with keys P@<t> for each threshold, then oIoU and mIoU,
    all as full-precision percentages.  Rounding to two decimals happens in
    the report formatting layer.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    report = {}
    n = len(records)
    for t in thresholds:
        hits = sum(1 for r in records if r.iou >= t)
        report[f"P@{t:g}"] = 100.0 * hits / n
    total_union = sum(r.union for r in records)
    total_intersection = sum(r.intersection for r in records if r.union > 0)
    report["oIoU"] = 100.0 * total_intersection / total_union if total_union > 0 else 100.0
    report["mIoU"] = 100.0 * sum(r.iou for r in records) / n
    return report
