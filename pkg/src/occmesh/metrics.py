"""3D joint/vertex errors and COCO-style keypoint AP over OKS thresholds.

3D inputs are in meters and errors are reported in millimeters. MPJPE and PVE
align the roots (pelvis joint, index 0 of the 24-joint layout) before measuring.
"""

import numpy as np

from .geometry import procrustes_align

COCO_SIGMAS = np.array(
    [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]
) / 10.0
OKS_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {"all": (0.0, 1e10), "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, 1e10)}
ROOT_JOINT = 0


def mpjpe(pred, gt, root=ROOT_JOINT):
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    d = (pred - pred[root]) - (gt - gt[root])
    return float(np.linalg.norm(d, axis=-1).mean() * 1000.0)


def pmpjpe(pred, gt):
    aligned, _ = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - np.asarray(gt, dtype=np.float64), axis=-1).mean() * 1000.0)


def pve(pred_vertices, gt_vertices, pred_root=None, gt_root=None):
    """Mean per-vertex error after root alignment; roots default to the vertex centroids."""
    pv = np.asarray(pred_vertices, dtype=np.float64)
    gv = np.asarray(gt_vertices, dtype=np.float64)
    if pv.shape != gv.shape:
        raise ValueError(f"shape mismatch: {pv.shape} vs {gv.shape}")
    pr = pv.mean(0) if pred_root is None else np.asarray(pred_root)
    gr = gv.mean(0) if gt_root is None else np.asarray(gt_root)
    return float(np.linalg.norm((pv - pr) - (gv - gr), axis=-1).mean() * 1000.0)


def oks(pred_kp, gt_kp, gt_visible, area, sigmas=COCO_SIGMAS):
    """Object keypoint similarity over the visible ground-truth keypoints (pixels, pixel^2 area)."""
    pred_kp = np.asarray(pred_kp, dtype=np.float64)
    gt_kp = np.asarray(gt_kp, dtype=np.float64)
    vis = np.asarray(gt_visible, dtype=bool)
    if not vis.any():
        return 0.0
    var = (2.0 * np.asarray(sigmas)) ** 2
    d2 = ((pred_kp - gt_kp) ** 2).sum(-1)
    e = d2 / var / (area + np.spacing(1)) / 2.0
    return float(np.exp(-e[vis]).mean())


def _match_image(preds, gts, thr, area_rng):
    """Greedy score-ordered matching for one image at one OKS threshold.

    Returns per-prediction (score, tp, ignored) and the number of counted GTs.
    """
    lo, hi = area_rng
    gt_ignore = np.array([not (lo <= g["area"] <= hi) for g in gts], dtype=bool)
    # non-ignored GTs are matched first
    gt_order = np.argsort(gt_ignore, kind="stable")
    order = sorted(range(len(preds)), key=lambda k: (-preds[k]["score"], k))
    taken = np.zeros(len(gts), dtype=bool)
    rows = []
    for k in order:
        p = preds[k]
        best, best_oks = -1, min(thr, 1 - 1e-10)
        for g in gt_order:
            if taken[g]:
                continue
            if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                break
            o = oks(p["keypoints"], gts[g]["keypoints"], gts[g]["visible"], gts[g]["area"])
            if o < best_oks:
                continue
            best, best_oks = g, o
        if best >= 0:
            taken[best] = True
            rows.append((p["score"], True, bool(gt_ignore[best])))
        else:
            parea = p.get("area", _kp_area(p["keypoints"]))
            rows.append((p["score"], False, not (lo <= parea <= hi)))
    return rows, int((~gt_ignore).sum())


def _kp_area(kp):
    kp = np.asarray(kp)
    return float(np.prod(kp.max(0) - kp.min(0)))


def _interp_ap(tps, scores, n_gt):
    if n_gt == 0:
        return -1.0, -1.0
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.asarray(tps, dtype=np.float64)[order]
    tp_sum = np.cumsum(tp)
    fp_sum = np.cumsum(1.0 - tp)
    recall = tp_sum / n_gt
    precision = tp_sum / np.maximum(tp_sum + fp_sum, np.spacing(1))
    # monotone precision envelope
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    q = np.zeros(len(RECALL_POINTS))
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    for ri, pi in enumerate(inds):
        if pi < len(precision):
            q[ri] = precision[pi]
    return float(q.mean()), float(recall[-1]) if len(recall) else 0.0


def average_precision(images, thresholds=OKS_THRESHOLDS):
    """COCO keypoint AP/AR.

    ``images`` is a list of ``(preds, gts)``; a prediction is a dict with
    ``keypoints`` (17, 2) and ``score`` (optional ``area``), a ground truth a
    dict with ``keypoints`` (17, 2), ``visible`` (17,) and ``area``.
    Returns a dict with AP, AP50, AP75, AP_M, AP_L and AR.
    """
    def evaluate(area_rng):
        aps, ars = [], []
        for thr in thresholds:
            scores, tps = [], []
            n_gt = 0
            for preds, gts in images:
                rows, n = _match_image(preds, gts, thr, area_rng)
                n_gt += n
                for s, tp, ign in rows:
                    if not ign:
                        scores.append(s)
                        tps.append(tp)
            ap, ar = _interp_ap(tps, scores, n_gt)
            aps.append(ap)
            ars.append(ar)
        return np.array(aps), np.array(ars)

    def mean_valid(x):
        x = x[x > -1]
        return float(x.mean()) if len(x) else -1.0

    ap_all, ar_all = evaluate(AREA_RANGES["all"])
    ap_m, _ = evaluate(AREA_RANGES["medium"])
    ap_l, _ = evaluate(AREA_RANGES["large"])
    thresholds = np.asarray(thresholds)
    out = {
        "AP": mean_valid(ap_all),
        "AP_M": mean_valid(ap_m),
        "AP_L": mean_valid(ap_l),
        "AR": mean_valid(ar_all),
        "per_threshold": ap_all.tolist(),
    }
    for name, t in (("AP50", 0.5), ("AP75", 0.75)):
        hit = np.flatnonzero(np.isclose(thresholds, t))
        out[name] = float(ap_all[hit[0]]) if len(hit) else None
    return out
