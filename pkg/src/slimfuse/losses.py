"""Training objectives for the two grounding tasks.

Box regression combines a distribution-focal term over discretized side
distances with a complete-IoU term; the confidence channel learns the IoU
of its own decoded box (binary cross entropy, zero target on negatives).
Segmentation combines dice and focal terms on the 2-channel mask logits.
The two task losses are balanced by learned homoscedastic uncertainty,
parameterized as log-variance for positivity.

The focal alpha acts as a global scale (not the positive/negative split),
so gamma=0, alpha=1 collapses exactly to cross entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nd
from .config import ModelConfig
from .nd import functional as F
from .nd.tensor import Tensor

_IOU_EPS = 1e-9
_DICE_EPS = 1.0
CENTER_RADIUS_STRIDES = 2.5


class ClampCounter:
    """Counts out-of-range regression targets that had to be clamped."""

    def __init__(self):
        self.count = 0


dfl_clamp_warnings = ClampCounter()


def _corners(box):
    cx, cy = box[..., 0], box[..., 1]
    half_w, half_h = box[..., 2] * 0.5, box[..., 3] * 0.5
    return cx - half_w, cy - half_h, cx + half_w, cy + half_h


def ciou_loss(pred, gt) -> Tensor:
    """Complete IoU loss on (..., 4) = (cx, cy, w, h) boxes; 0 when identical.

    Returns a loss per box for batched inputs. Fully differentiable,
    including the aspect-ratio coupling weight (the gradient checker
    compares against the function actually computed).
    """
    pred = nd.as_tensor(pred)
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
    if np.any(gt[..., 2] <= 0) or np.any(gt[..., 3] <= 0):
        raise ValueError("degenerate ground-truth box with non-positive extents")
    px1, py1, px2, py2 = _corners(pred)
    gx1, gy1, gx2, gy2 = _corners(gt)

    ix = nd.maximum(nd.minimum(px2, gx2) - nd.maximum(px1, gx1), 0.0)
    iy = nd.maximum(nd.minimum(py2, gy2) - nd.maximum(py1, gy1), 0.0)
    inter = ix * iy
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    iou = inter / (union + _IOU_EPS)

    cx1 = nd.minimum(px1, gx1)
    cy1 = nd.minimum(py1, gy1)
    cx2 = nd.maximum(px2, gx2)
    cy2 = nd.maximum(py2, gy2)
    diag = (cx2 - cx1) ** 2.0 + (cy2 - cy1) ** 2.0
    center = (pred[..., 0] - gt[..., 0]) ** 2.0 + (pred[..., 1] - gt[..., 1]) ** 2.0

    v = (4.0 / np.pi**2) * (
        nd.arctan(gt[..., 2] / gt[..., 3]) - nd.arctan(pred[..., 2] / pred[..., 3])) ** 2.0
    alpha = v / ((1.0 - iou) + v + _IOU_EPS)
    return 1.0 - iou + center / (diag + _IOU_EPS) + alpha * v


def dfl_loss(dist_logits, target_sides) -> Tensor:
    """Distribution-focal regression against the two bracketing bins.

    dist_logits: (4, reg_max); target_sides: 4 reals in bin units. Targets
    outside [0, reg_max - 1] are clamped and counted in dfl_clamp_warnings.
    Linear-interpolation cross entropy, reported minus the constant entropy
    of the interpolation weights so a perfectly matched distribution scores
    exactly 0 (gradients are unchanged; integer targets reduce to plain CE
    on one bin either way).
    """
    dist_logits = nd.as_tensor(dist_logits)
    reg_max = dist_logits.shape[-1]
    t = np.asarray(target_sides, dtype=np.float64).copy()
    out_of_range = (t < 0) | (t > reg_max - 1)
    if out_of_range.any():
        dfl_clamp_warnings.count += int(out_of_range.sum())
        t = np.clip(t, 0, reg_max - 1)
    per_side = _dfl_per_side(dist_logits, t)
    return nd.mean(per_side)


def _dfl_per_side(dist_logits, t: np.ndarray) -> Tensor:
    """Floor-free interpolated CE per side; supports leading batch dims."""
    reg_max = dist_logits.shape[-1]
    log_p = F.log_softmax(dist_logits, axis=-1)
    lo = np.minimum(np.floor(t).astype(int), reg_max - 2)
    hi = lo + 1
    w_hi = t - lo
    w_lo = 1.0 - w_hi
    grid = np.ix_(*[np.arange(s) for s in t.shape])
    picked = log_p[grid + (lo,)] * w_lo + log_p[grid + (hi,)] * w_hi
    entropy = -(np.where(w_lo > 0, w_lo * np.log(np.maximum(w_lo, 1e-300)), 0.0)
                + np.where(w_hi > 0, w_hi * np.log(np.maximum(w_hi, 1e-300)), 0.0))
    return (-picked) - entropy


def dice_loss(mask_logits, gt_mask) -> Tensor:
    """1 - 2|P*G| / (|P| + |G|) on foreground probabilities, eps = 1."""
    mask_logits = nd.as_tensor(mask_logits)
    g = np.asarray(gt_mask, dtype=np.float64)
    p_fg = F.softmax(mask_logits, axis=-3)[..., 0, :, :]
    inter = nd.sum_(p_fg * g)
    total = nd.sum_(p_fg) + float(g.sum())
    return 1.0 - (2.0 * inter + _DICE_EPS) / (total + _DICE_EPS)


def focal_loss(mask_logits, gt_mask, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Modulated cross entropy on the 2-class mask; alpha is a global scale."""
    mask_logits = nd.as_tensor(mask_logits)
    g = np.asarray(gt_mask, dtype=np.float64)
    log_p = F.log_softmax(mask_logits, axis=-3)
    log_pt = log_p[..., 0, :, :] * g + log_p[..., 1, :, :] * (1.0 - g)
    if gamma == 0.0:
        return -alpha * nd.mean(log_pt)
    pt = nd.exp(log_pt)
    return -alpha * nd.mean(((1.0 - pt) ** gamma) * log_pt)


class UncertaintyWeights(nd.Module):
    """Learned log-variances balancing the two task losses."""

    def __init__(self):
        super().__init__()
        dt = nd.default_dtype()
        self.s1 = nd.Parameter(np.zeros(1, dtype=dt))  # log sigma_1^2
        self.s2 = nd.Parameter(np.zeros(1, dtype=dt))

    @property
    def sigmas(self) -> tuple[float, float]:
        return (float(np.exp(0.5 * self.s1.data[0])), float(np.exp(0.5 * self.s2.data[0])))


def joint_loss(l_rec, l_res, u: UncertaintyWeights) -> Tensor:
    """0.5*exp(-s1)*L_rec + 0.5*exp(-s2)*L_res + 0.5*(s1 + s2).

    With s_k = log sigma_k^2 this is exactly the uncertainty-weighted sum
    1/(2 sigma_1^2) L_rec + 1/(2 sigma_2^2) L_res + log sigma_1 + log sigma_2,
    whose stationary point sits at sigma_k^2 = L_k.
    """
    l_rec, l_res = nd.as_tensor(l_rec), nd.as_tensor(l_res)
    s1, s2 = nd.sum_(u.s1), nd.sum_(u.s2)
    return (0.5 * nd.exp(-s1) * l_rec + 0.5 * nd.exp(-s2) * l_res
            + 0.5 * s1 + 0.5 * s2)


@dataclass
class LevelAssignment:
    gt_index: np.ndarray  # (H, W) int, -1 for negatives
    stride: int


def assign_targets(level_shapes, strides, gt_boxes,
                   radius: float = CENTER_RADIUS_STRIDES) -> list[LevelAssignment]:
    """Center-sampling assignment: a location is positive for a box when its
    center lies inside the box and within `radius` strides of the box
    center; ties resolve to the smaller box."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    out = []
    for (h, w), stride in zip(level_shapes, strides):
        idx = np.full((h, w), -1, dtype=np.int64)
        if len(gt):
            ys = (np.arange(h) + 0.5) * stride
            xs = (np.arange(w) + 0.5) * stride
            cy, cx = np.meshgrid(ys, xs, indexing="ij")
            best_area = np.full((h, w), np.inf)
            for g, (bcx, bcy, bw, bh) in enumerate(gt):
                x1, y1, x2, y2 = bcx - bw / 2, bcy - bh / 2, bcx + bw / 2, bcy + bh / 2
                inside = (cx >= x1) & (cx <= x2) & (cy >= y1) & (cy <= y2)
                near = (np.abs(cx - bcx) <= radius * stride) & (np.abs(cy - bcy) <= radius * stride)
                hit = inside & near
                area = bw * bh
                take = hit & (area < best_area)
                idx[take] = g
                best_area[take] = area
        out.append(LevelAssignment(idx, stride))
    return out


def rec_loss(rec_maps, gt_boxes, cfg: ModelConfig, strides=(8, 16, 32, 64),
             parts: dict | None = None, conf_target: str = "iou") -> Tensor:
    """Per-sample detection loss over all pyramid levels.

    Positives contribute DFL + CIoU + BCE(conf, IoU of the decoded box);
    negatives contribute BCE(conf, 0). Total is normalized by the positive
    count (at least 1). The IoU confidence target is detached (the head
    learns to predict its own localization quality, it does not optimize
    through it); `conf_target="one"` switches to a constant-1 target, which
    makes the composite loss fully checkable by finite differences.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    reg_max = cfg.reg_max
    assigns = assign_targets([m.shape[-2:] for m in rec_maps], strides, gt)
    total = nd.as_tensor(0.0)
    n_pos = 0
    for level, assign in zip(rec_maps, assigns):
        level = nd.as_tensor(level)
        stride = float(assign.stride)
        h, w = level.shape[-2:]
        conf_logits = level[0]
        conf_targets = np.zeros((h, w))
        pos = np.argwhere(assign.gt_index >= 0)
        if len(pos):
            ii, jj = pos[:, 0], pos[:, 1]
            g = gt[assign.gt_index[ii, jj]]                      # (P, 4)
            cx0 = (jj + 0.5) * stride
            cy0 = (ii + 0.5) * stride
            gx1, gy1 = g[:, 0] - g[:, 2] / 2, g[:, 1] - g[:, 3] / 2
            gx2, gy2 = g[:, 0] + g[:, 2] / 2, g[:, 1] + g[:, 3] / 2
            target_sides = np.stack(
                [cx0 - gx1, cy0 - gy1, gx2 - cx0, gy2 - cy0], axis=1) / stride
            clipped = np.clip(target_sides, 0.0, reg_max - 1)
            dfl_clamp_warnings.count += int((clipped != target_sides).sum())

            side_logits = nd.reshape(
                nd.transpose(level[1:, ii, jj], (1, 0)), (len(pos), 4, reg_max))
            total = total + nd.sum_(_dfl_per_side(side_logits, clipped)) * 0.25

            probs = F.softmax(side_logits, axis=-1)
            bins = np.arange(reg_max, dtype=np.float64).reshape(1, 1, -1)
            sides = nd.sum_(probs * bins, axis=-1) * stride      # (P, 4)
            pred_box = nd.stack([
                (cx0 - sides[..., 0] + cx0 + sides[..., 2]) * 0.5,
                (cy0 - sides[..., 1] + cy0 + sides[..., 3]) * 0.5,
                nd.maximum(sides[..., 0] + sides[..., 2], 1e-6),
                nd.maximum(sides[..., 1] + sides[..., 3], 1e-6),
            ], axis=-1)
            total = total + nd.sum_(ciou_loss(pred_box, g))

            if conf_target == "one":
                conf_targets[ii, jj] = 1.0
            else:
                pb = pred_box.data
                conf_targets[ii, jj] = _box_iou_np(pb, g)
            n_pos += len(pos)
        total = total + nd.sum_(F.bce_with_logits(conf_logits, conf_targets))
    if parts is not None:
        parts["n_pos"] = n_pos
    return total * (1.0 / max(n_pos, 1))


def _box_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IoU of aligned (..., 4) center-format boxes."""
    ax1, ay1 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax2, ay2 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx1, by1 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx2, by2 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def res_loss(mask_logits, gt_mask, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    return dice_loss(mask_logits, gt_mask) + focal_loss(mask_logits, gt_mask, gamma, alpha)
