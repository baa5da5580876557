"""Set matching and the training loss.

Ground truth for one image is a dict of arrays::

    {"boxes": [n, 4] (cx, cy, w, h), "gaze": [n, 2], "inout": [n] in {0, 1}}

Predictions for one image are the matching arrays sliced from a model output
(``boxes``, ``logits``, ``gaze``, ``inout``, ``heatmaps``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .tensor import Tensor, log_sigmoid, maximum, minimum, sigmoid, tabs, take

STRATEGIES = ("BM1", "BM2", "BM3", "BM4", "BM5", "BM6")


@dataclass
class MatchConfig:
    """Matching strategy and cost weights.

    ``BM1``-``BM3`` match on head class and box only; ``BM4``-``BM6`` add the
    gaze terms. ``BM1``/``BM4`` predict a gaze location, ``BM2``/``BM5`` a
    heatmap, ``BM3``/``BM6`` both.
    """

    strategy: str = "BM1"
    cost_class: float = 2.0
    cost_bbox: float = 5.0
    cost_giou: float = 2.0
    cost_gaze: float = 5.0
    cost_inout: float = 1.0
    cost_heatmap: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    heatmap_sigma: float = 3.0
    heatmap_size: int = 16

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")

    @property
    def gaze_in_matching(self):
        return self.strategy in ("BM4", "BM5", "BM6")

    @property
    def predict_location(self):
        return self.strategy in ("BM1", "BM3", "BM4", "BM6")

    @property
    def predict_heatmap(self):
        return self.strategy in ("BM2", "BM3", "BM5", "BM6")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossWeights:
    bbox: float = 5.0
    giou: float = 2.0
    cls: float = 2.0
    inout: float = 1.0
    gaze: float = 5.0
    heatmap: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")

    def to_dict(self):
        return asdict(self)


@dataclass
class Assignment:
    """Injective ground-truth -> query mapping."""

    gt_indices: np.ndarray
    query_indices: np.ndarray
    total_cost: float

    @property
    def pairs(self):
        return dict(zip(self.gt_indices.tolist(), self.query_indices.tolist()))

    def __len__(self):
        return len(self.gt_indices)


# -- boxes --------------------------------------------------------------

def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def giou(box_a, box_b):
    """Generalized IoU of two corner-format boxes ``(x1, y1, x2, y2)``."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {box.tolist()}: need x1<x2 and y1<y2")
    return float(giou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a, b):
    """Pairwise IoU and union between corner boxes ``[n, 4]`` and ``[m, 4]``."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union, union


def giou_matrix(a, b):
    iou, union = iou_matrix(a, b)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = rb - lt
    hull = wh[..., 0] * wh[..., 1]
    return iou - (hull - union) / hull


def _xyxy_tensor(b):
    cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_pairs(pred, target):
    """Differentiable GIoU between rows of ``pred`` (Tensor) and ``target``, both cxcywh."""
    target = Tensor(np.asarray(target, dtype=np.float64))
    px1, py1, px2, py2 = _xyxy_tensor(pred)
    tx1, ty1, tx2, ty2 = _xyxy_tensor(target)
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = maximum(minimum(px2, tx2) - maximum(px1, tx1), 0.0)
    ih = maximum(minimum(py2, ty2) - maximum(py1, ty1), 0.0)
    inter = iw * ih
    union = area_p + area_t - inter
    hull = (maximum(px2, tx2) - minimum(px1, tx1)) * (maximum(py2, ty2) - minimum(py1, ty1))
    return inter / union - (hull - union) / hull


# -- classification losses ---------------------------------------------

def _log_sigmoid_np(x):
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def focal_loss(logit, target, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss of one logit; ``alpha=None`` disables class weighting."""
    z = float(logit)
    sign = 1.0 if target else -1.0
    log_pt = float(_log_sigmoid_np(np.array(sign * z)))
    one_minus_pt = math.exp(float(_log_sigmoid_np(np.array(-sign * z))))
    w = 1.0 if alpha is None else (alpha if target else 1.0 - alpha)
    return -w * one_minus_pt ** gamma * log_pt


def focal_loss_tensor(logits, targets, alpha=0.25, gamma=2.0):
    """Elementwise focal loss on a logit Tensor with a 0/1 target array."""
    t = np.asarray(targets, dtype=np.float64)
    sign = Tensor(2.0 * t - 1.0)
    signed = logits * sign
    log_pt = log_sigmoid(signed)
    mod = sigmoid(-signed) ** gamma if gamma else 1.0
    w = np.ones_like(t) if alpha is None else alpha * t + (1.0 - alpha) * (1.0 - t)
    return -(log_pt * mod) * Tensor(w)


def bce_with_logits_tensor(logits, targets):
    t = np.asarray(targets, dtype=np.float64)
    return -(log_sigmoid(logits) * Tensor(t) + log_sigmoid(-logits) * Tensor(1.0 - t))


# -- heatmap targets ----------------------------------------------------

def render_gaze_heatmap(gaze_point, H, W, sigma):
    """Unnormalized Gaussian on an ``H x W`` grid centered on the cell center
    nearest to ``gaze_point``; ``sigma`` is in cells and the peak is 1."""
    gx, gy = float(gaze_point[0]), float(gaze_point[1])
    if not (0.0 <= gx <= 1.0 and 0.0 <= gy <= 1.0):
        raise ValueError(f"gaze point {gaze_point} outside [0, 1]^2")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    cx = min(int(gx * W), W - 1)
    cy = min(int(gy * H), H - 1)
    ys, xs = np.mgrid[0:H, 0:W]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


# -- matching -----------------------------------------------------------

def matching_cost_matrix(pred, gt, cfg: MatchConfig):
    """Cost of assigning each ground truth (rows) to each query (columns)."""
    n_gt = len(gt["boxes"])
    n_q = len(pred["boxes"])
    if n_gt == 0:
        raise ValueError("matching_cost_matrix needs at least one ground truth")
    if n_gt > n_q:
        raise ValueError(f"{n_gt} ground truths exceed {n_q} queries")
    z = np.asarray(pred["logits"], dtype=np.float64)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    p = np.exp(_log_sigmoid_np(z))
    pos = a * (1 - p) ** g * -_log_sigmoid_np(z)
    neg = (1 - a) * p ** g * -_log_sigmoid_np(-z)
    c_class = np.broadcast_to(pos - neg, (n_gt, n_q))

    pb = np.asarray(pred["boxes"], dtype=np.float64)
    gb = np.asarray(gt["boxes"], dtype=np.float64)
    c_bbox = np.abs(gb[:, None, :] - pb[None, :, :]).sum(-1)
    c_giou = -giou_matrix(cxcywh_to_xyxy(gb), cxcywh_to_xyxy(pb))
    cost = cfg.cost_class * c_class + cfg.cost_bbox * c_bbox + cfg.cost_giou * c_giou

    if cfg.gaze_in_matching:
        inframe = np.asarray(gt["inout"], dtype=np.float64)
        zi = np.asarray(pred["inout"], dtype=np.float64)
        c_io = -(inframe[:, None] * _log_sigmoid_np(zi)[None] + (1 - inframe[:, None]) * _log_sigmoid_np(-zi)[None])
        cost = cost + cfg.cost_inout * c_io
        gg = np.asarray(gt["gaze"], dtype=np.float64)
        if cfg.predict_location:
            pg = np.asarray(pred["gaze"], dtype=np.float64)
            c_gaze = np.abs(gg[:, None, :] - pg[None, :, :]).sum(-1) * inframe[:, None]
            cost = cost + cfg.cost_gaze * c_gaze
        if cfg.predict_heatmap:
            s = cfg.heatmap_size
            ph = np.asarray(pred["heatmaps"], dtype=np.float64)
            c_hm = np.zeros((n_gt, n_q))
            for i in range(n_gt):
                if inframe[i]:
                    tgt = render_gaze_heatmap(gg[i], s, s, cfg.heatmap_sigma).reshape(-1)
                    c_hm[i] = ((ph - tgt[None]) ** 2).mean(-1)
            cost = cost + cfg.cost_heatmap * c_hm
    return np.ascontiguousarray(cost)


def hungarian_assign(cost):
    """Minimum-cost injective assignment of rows to columns.

    Ties are broken toward the lexicographically smallest column vector.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        bad = np.argwhere(~np.isfinite(cost))[0].tolist()
        raise ValueError(f"cost matrix has a non-finite entry at {bad}")
    n, m = cost.shape
    if n > m:
        raise ValueError(f"cannot assign {n} rows injectively into {m} columns")
    cols = _kernels.solve_assignment(cost)
    rows = np.arange(n)
    total = float(sum(cost[i, cols[i]] for i in range(n)))
    return Assignment(gt_indices=rows, query_indices=np.asarray(cols, dtype=np.int64), total_cost=total)


def prediction_slice(out, b, heatmap=True):
    """Numpy arrays for image ``b`` of a batched model output."""
    return {
        "boxes": out.boxes.data[b],
        "logits": out.head_logits.data[b],
        "gaze": None if out.gaze is None else out.gaze.data[b],
        "inout": out.inout_logits.data[b],
        "heatmaps": None if (out.heatmaps is None or not heatmap) else out.heatmaps.data[b],
    }


def match_batch(out, targets, cfg: MatchConfig):
    """One :class:`Assignment` per image (empty when the image has no heads)."""
    result = []
    for b, gt in enumerate(targets):
        if len(gt["boxes"]) == 0:
            result.append(Assignment(np.zeros(0, np.int64), np.zeros(0, np.int64), 0.0))
            continue
        result.append(hungarian_assign(matching_cost_matrix(prediction_slice(out, b), gt, cfg)))
    return result


# -- training loss ------------------------------------------------------

def total_loss(out, targets, assignments, weights: LossWeights, cfg: MatchConfig):
    """Weighted sum of box L1, GIoU, focal class, in/out BCE, gaze L1 and heatmap L2.

    Class loss covers every query (unmatched ones target background); the
    other terms cover matched pairs, and the gaze and heatmap terms only
    in-frame ground truths. Box-type terms are normalized by the number of
    ground truths, gaze-type terms by the number of in-frame ground truths.

    Returns the scalar loss Tensor and a dict of float per-term values.
    """
    B, N = out.head_logits.shape
    flat_q, gt_boxes, gt_gaze, gt_inout = [], [], [], []
    for b, (gt, asg) in enumerate(zip(targets, assignments)):
        if len(asg) and (asg.query_indices.min() < 0 or asg.query_indices.max() >= N):
            raise IndexError(f"assignment for image {b} references a query outside [0, {N})")
        if len(asg) and asg.gt_indices.max() >= len(gt["boxes"]):
            raise IndexError(f"assignment for image {b} references a missing ground truth")
        flat_q.extend((b * N + asg.query_indices).tolist())
        gt_boxes.append(np.asarray(gt["boxes"], dtype=np.float64).reshape(-1, 4)[asg.gt_indices])
        gt_gaze.append(np.asarray(gt["gaze"], dtype=np.float64).reshape(-1, 2)[asg.gt_indices])
        gt_inout.append(np.asarray(gt["inout"], dtype=np.float64).reshape(-1)[asg.gt_indices])
    flat_q = np.asarray(flat_q, dtype=np.int64)
    gt_boxes = np.concatenate(gt_boxes) if gt_boxes else np.zeros((0, 4))
    gt_gaze = np.concatenate(gt_gaze) if gt_gaze else np.zeros((0, 2))
    gt_inout = np.concatenate(gt_inout) if gt_inout else np.zeros(0)
    n_gt = max(1, len(flat_q))
    inframe = gt_inout > 0.5
    n_in = max(1, int(inframe.sum()))

    cls_target = np.zeros(B * N)
    cls_target[flat_q] = 1.0
    l_cls = focal_loss_tensor(out.head_logits.reshape(B * N), cls_target,
                              cfg.focal_alpha, cfg.focal_gamma).sum() * (1.0 / n_gt)
    terms = {"class": l_cls}
    zero = Tensor(0.0)
    if len(flat_q):
        pb = take(out.boxes.reshape(B * N, 4), flat_q, 0)
        terms["bbox"] = tabs(pb - Tensor(gt_boxes)).sum() * (1.0 / n_gt)
        terms["giou"] = (1.0 - giou_pairs(pb, gt_boxes)).sum() * (1.0 / n_gt)
        pio = take(out.inout_logits.reshape(B * N), flat_q, 0)
        terms["inout"] = bce_with_logits_tensor(pio, gt_inout).sum() * (1.0 / n_gt)
        q_in = flat_q[inframe]
        if len(q_in) and out.gaze is not None:
            pg = take(out.gaze.reshape(B * N, 2), q_in, 0)
            terms["gaze"] = tabs(pg - Tensor(gt_gaze[inframe])).sum() * (1.0 / n_in)
        if len(q_in) and out.heatmaps is not None:
            s = cfg.heatmap_size
            tgt = np.stack([render_gaze_heatmap(g, s, s, cfg.heatmap_sigma).reshape(-1)
                            for g in gt_gaze[inframe]])
            ph = take(out.heatmaps.reshape(B * N, s * s), q_in, 0)
            terms["heatmap"] = ((ph - Tensor(tgt)) ** 2).mean(axis=1).sum() * (1.0 / n_in)
    w = {"bbox": weights.bbox, "giou": weights.giou, "class": weights.cls,
         "inout": weights.inout, "gaze": weights.gaze, "heatmap": weights.heatmap}
    total = zero
    for k, t in terms.items():
        if w[k]:
            total = total + t * w[k]
    breakdown = {k: (terms[k].item() if k in terms else 0.0) for k in w}
    breakdown["total"] = total.item()
    return total, breakdown
