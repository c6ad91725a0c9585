"""Detection and segmentation evaluation.

Detections are matched greedily, highest confidence first, one-to-one per
ground-truth box, requiring IoU >= threshold; average precision uses
all-point interpolation, swept over the 10 thresholds 0.50:0.05:0.95.
The evaluation is class-agnostic: every referred target is one category.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Detection, box_iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


@dataclass
class EvalResult:
    ap50: float
    ap50_95: float
    ar50_95: float
    miou: float
    ap_per_threshold: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "AP50": self.ap50, "AP50-95": self.ap50_95,
            "AR50-95": self.ar50_95, "mIoU": self.miou,
            "ap_per_threshold": {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()},
        }


def _to_corners(box) -> tuple:
    if isinstance(box, Detection):
        return box.corners()
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def match_detections(dets, gts, iou_thr: float) -> list[bool]:
    """TP/FP flags for confidence-descending detections against one scene.

    Each ground truth is matched at most once; a detection takes the
    highest-IoU still-unmatched ground truth at or above the threshold.
    """
    confs = [d.conf for d in dets]
    if any(confs[i] < confs[i + 1] for i in range(len(confs) - 1)):
        raise ValueError("match_detections expects detections sorted by descending confidence")
    gt_corners = [_to_corners(g) for g in gts]
    taken = [False] * len(gt_corners)
    flags = []
    for det in dets:
        corners = det.corners()
        best, best_iou = -1, 0.0
        for gi, gc in enumerate(gt_corners):
            if taken[gi]:
                continue
            iou = box_iou(corners, gc)
            if iou >= iou_thr and iou > best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            taken[best] = True
        flags.append(best >= 0)
    return flags


def _pooled_flags(scene_dets, scene_gts, thr):
    order = []
    for si, dets in enumerate(scene_dets):
        ranked = sorted(range(len(dets)), key=lambda i: (-dets[i].conf, i))
        flags = match_detections([dets[i] for i in ranked], scene_gts[si], thr)
        for rank, det_i in enumerate(ranked):
            order.append((-dets[det_i].conf, si, det_i, flags[rank]))
    order.sort()
    return [tp for *_, tp in order]


def average_precision(scene_dets, scene_gts, thr: float) -> float:
    """All-point interpolated AP over a dataset at one IoU threshold."""
    n_gt = sum(len(g) for g in scene_gts)
    if n_gt == 0:
        import warnings

        warnings.warn("average_precision: no ground-truth boxes; defined as 0")
        return 0.0
    flags = _pooled_flags(scene_dets, scene_gts, thr)
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum([not f for f in flags])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def recall_at(scene_dets, scene_gts, thr: float) -> float:
    n_gt = sum(len(g) for g in scene_gts)
    if n_gt == 0:
        return 0.0
    flags = _pooled_flags(scene_dets, scene_gts, thr)
    return float(sum(flags) / n_gt)


def miou(pred_fg, gt_fg) -> float:
    """Mean of foreground IoU and background IoU; empty/empty counts as 1."""
    pred_fg = np.asarray(pred_fg, dtype=bool)
    gt_fg = np.asarray(gt_fg, dtype=bool)
    ious = []
    for cls_pred, cls_gt in ((pred_fg, gt_fg), (~pred_fg, ~gt_fg)):
        union = (cls_pred | cls_gt).sum()
        ious.append(1.0 if union == 0 else (cls_pred & cls_gt).sum() / union)
    return float(np.mean(ious))


def evaluate_rec(scene_dets, scene_gts) -> dict:
    per_thr = {float(t): average_precision(scene_dets, scene_gts, float(t))
               for t in IOU_THRESHOLDS}
    recs = [recall_at(scene_dets, scene_gts, float(t)) for t in IOU_THRESHOLDS]
    return {
        "ap50": per_thr[0.5],
        "ap50_95": float(np.mean(list(per_thr.values()))),
        "ar50_95": float(np.mean(recs)),
        "ap_per_threshold": per_thr,
    }


def evaluate(scene_dets, scene_gts, mask_pairs) -> EvalResult:
    """Full result: detection metrics plus mean per-sample mask IoU."""
    rec = evaluate_rec(scene_dets, scene_gts)
    mious = [miou(p, g) for p, g in mask_pairs]
    return EvalResult(
        ap50=rec["ap50"], ap50_95=rec["ap50_95"], ar50_95=rec["ar50_95"],
        miou=float(np.mean(mious)) if mious else 0.0,
        ap_per_threshold=rec["ap_per_threshold"],
    )
