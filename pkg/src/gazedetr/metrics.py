"""Gaze and detection metrics: heatmap AUC, distances, in/out AP and the
dual-gated detection mAP (a hit needs box IoU above 0.5 and gaze error
below 0.15)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .data import resize_image
from .matching import cxcywh_to_xyxy, iou_matrix

AUC_GRID = (64, 64)
AUC_SIGMA = 3.0


@dataclass
class MetricReport:
    auc: float | None = None
    avg_dist: float | None = None
    min_dist: float | None = None
    l2_dist: float | None = None
    ap_inout: float | None = None
    map: float | None = None
    head_ap: float | None = None
    gaze_l2: float | None = None
    center_l2: float | None = None
    n_images: int = 0
    n_instances: int = 0

    def to_dict(self):
        return asdict(self)

    def to_text(self):
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                lines.append(f"{k}=absent")
            elif isinstance(v, float):
                lines.append(f"{k}={v:.6f}")
            else:
                lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


def gt_label_grid(gt_points, H, W):
    """Boolean grid marking each cell that contains a ground-truth point."""
    lab = np.zeros((H, W), dtype=bool)
    for x, y in gt_points:
        if 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0:
            lab[min(int(y * H), H - 1), min(int(x * W), W - 1)] = True
    return lab


def auc_heatmap(pred_heatmap, gt_points, grid=AUC_GRID):
    """ROC AUC of heatmap values against point-containing cells.

    Heatmaps of another size are bilinearly resampled to ``grid``. Tied
    scores count one half (trapezoidal ROC). Returns None when the labels are
    all positive or all negative.
    """
    hm = np.asarray(pred_heatmap, dtype=np.float64)
    if np.any(hm < 0):
        raise ValueError("heatmap values must be nonnegative")
    if not len(gt_points):
        raise ValueError("auc_heatmap needs at least one ground-truth point")
    if grid is not None and hm.shape != tuple(grid):
        hm = resize_image(hm[None], grid[0], grid[1])[0]
    lab = gt_label_grid(gt_points, *hm.shape).reshape(-1)
    n_pos = int(lab.sum())
    n_neg = lab.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(hm.reshape(-1))
    return float((ranks[lab].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gaussian_heatmap(point, H, W, sigma=AUC_SIGMA):
    """Gaussian (peak 1, ``sigma`` in cells) centered exactly at a regressed point."""
    ys, xs = np.mgrid[0:H, 0:W]
    cx, cy = point[0] * W - 0.5, point[1] * H - 0.5
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))


def distance_metrics(pred_gaze, gt_points):
    """``(avg_dist, min_dist, l2)``: distance to the centroid of the gt set,
    the smallest distance to any gt point, and the distance to the sole gt
    point (None for multi-point sets)."""
    pts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("distance_metrics needs at least one ground-truth point")
    p = np.asarray(pred_gaze, dtype=np.float64)
    avg = float(np.linalg.norm(p - pts.mean(axis=0)))
    d = np.linalg.norm(pts - p[None], axis=1)
    return avg, float(d.min()), float(d[0]) if len(pts) == 1 else None


def all_points_ap(scores, is_tp, n_pos):
    """Average precision summed over recall steps; tied scores form one step."""
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_pos <= 0:
        return None
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], is_tp[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    recall = tp[last] / n_pos
    precision = tp[last] / (tp[last] + fp[last])
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def ap_inout(scores, labels):
    """AP of in-frame (label 1) vs out-of-frame; None if only one class is present."""
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        return None
    return all_points_ap(scores, labels, int(labels.sum()))


def map_detection(records, iou_thresh=0.5, dist_thresh=0.15, use_gaze=True):
    """Pooled, score-ranked AP with a dual gate.

    Each record has ``pred_boxes`` (cxcywh), ``pred_scores``, ``pred_gaze``,
    ``gt_boxes``, ``gt_gaze_sets`` and ``gt_inframe``. A prediction is a hit
    when some unclaimed ground truth in its image has IoU strictly above
    ``iou_thresh`` and, for in-frame ground truths, gaze error (to the gt
    centroid) strictly below ``dist_thresh``. Among eligible ground truths the
    highest IoU is claimed. Returns None when there are no ground truths.
    """
    pool = []
    n_gt = 0
    ious = []
    for r, rec in enumerate(records):
        gb = np.asarray(rec["gt_boxes"], dtype=np.float64).reshape(-1, 4)
        pb = np.asarray(rec["pred_boxes"], dtype=np.float64).reshape(-1, 4)
        n_gt += len(gb)
        if len(gb) and len(pb):
            ious.append(iou_matrix(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb))[0])
        else:
            ious.append(np.zeros((len(pb), len(gb))))
        for j, s in enumerate(np.asarray(rec["pred_scores"], dtype=np.float64).reshape(-1)):
            pool.append((-s, r, j))
    if n_gt == 0:
        return None
    pool.sort()
    claimed = [np.zeros(len(np.asarray(rec["gt_boxes"]).reshape(-1, 4)), dtype=bool) for rec in records]
    scores, hits = [], []
    for neg_s, r, j in pool:
        rec = records[r]
        ok = ious[r][j] > iou_thresh
        ok &= ~claimed[r]
        if use_gaze and ok.any():
            pg = np.asarray(rec["pred_gaze"], dtype=np.float64)[j]
            for i in np.nonzero(ok)[0]:
                if rec["gt_inframe"][i]:
                    centroid = np.asarray(rec["gt_gaze_sets"][i], dtype=np.float64).reshape(-1, 2).mean(0)
                    ok[i] = np.linalg.norm(pg - centroid) < dist_thresh
        hit = bool(ok.any())
        if hit:
            i = int(np.argmax(np.where(ok, ious[r][j], -np.inf)))
            claimed[r][i] = True
        scores.append(-neg_s)
        hits.append(hit)
    return all_points_ap(scores, hits, n_gt)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def evaluate_records(records, grid=AUC_GRID, sigma=AUC_SIGMA):
    """Full metric report over per-image prediction/ground-truth records.

    Gaze metrics use the prediction matched to each ground-truth head
    (``match`` in the record: gt index -> prediction index). Location-only
    predictions are scored for AUC through a Gaussian at the predicted point.
    """
    aucs, avgs, mins, l2s, gaze_l2, center_l2 = [], [], [], [], [], []
    io_scores, io_labels = [], []
    n_inst = 0
    for rec in records:
        n_inst += len(rec["gt_boxes"])
        for gi, pj in rec.get("match", {}).items():
            io_scores.append(float(_sigmoid(rec["pred_inout"][pj])))
            io_labels.append(bool(rec["gt_inframe"][gi]))
            if not rec["gt_inframe"][gi]:
                continue
            pts = np.asarray(rec["gt_gaze_sets"][gi], dtype=np.float64).reshape(-1, 2)
            pg = np.asarray(rec["pred_gaze"][pj], dtype=np.float64)
            avg, mn, l2 = distance_metrics(pg, pts)
            avgs.append(avg)
            mins.append(mn)
            if l2 is not None:
                l2s.append(l2)
            gaze_l2.append(avg)
            center_l2.append(float(np.linalg.norm(pts.mean(0) - 0.5)))
            hms = rec.get("pred_heatmaps")
            hm = hms[pj] if hms is not None else gaussian_heatmap(pg, grid[0], grid[1], sigma)
            a = auc_heatmap(hm, [tuple(p) for p in pts], grid)
            if a is not None:
                aucs.append(a)
    mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
    return MetricReport(
        auc=mean(aucs), avg_dist=mean(avgs), min_dist=mean(mins), l2_dist=mean(l2s),
        ap_inout=ap_inout(io_scores, io_labels) if io_scores else None,
        map=map_detection(records), head_ap=map_detection(records, use_gaze=False),
        gaze_l2=mean(gaze_l2), center_l2=mean(center_l2),
        n_images=len(records), n_instances=n_inst,
    )


__all__ = [
    "MetricReport", "auc_heatmap", "distance_metrics", "ap_inout", "map_detection",
    "all_points_ap", "evaluate_records", "gaussian_heatmap", "gt_label_grid",
]
