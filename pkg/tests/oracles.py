"""Independent reference implementations used as test oracles.

These are written directly from the mathematical definitions, with plain
loops where that keeps them obviously correct, and share no code with the
package.
"""

import itertools
import math

import numpy as np


def gram_schmidt(r):
    a1 = np.array(r[:3], dtype=np.float64)
    a2 = np.array(r[3:], dtype=np.float64)
    b1 = a1 / math.sqrt(a1 @ a1)
    u = a2 - (b1 @ a2) * b1
    b2 = u / math.sqrt(u @ u)
    b3 = np.array([
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ])
    return np.column_stack([b1, b2, b3])


def random_rotation(rng):
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def dense_gaussian_max(centers, H, W, sigma):
    """Evaluate every Gaussian at every pixel and take the maximum."""
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            best = 0.0
            for cx, cy in centers:
                d2 = (j - cx) ** 2 + (i - cy) ** 2
                best = max(best, math.exp(-d2 / (2 * sigma * sigma)))
            out[i, j] = best
    return out


def brute_force_peaks(m, threshold, window):
    """Pixels above threshold that beat every neighbor in the window.

    Ties with a neighbor are resolved in favour of the earlier pixel in
    row-major order.
    """
    H, W = m.shape
    r = window // 2
    found = []
    for i in range(H):
        for j in range(W):
            v = m[i, j]
            if v <= threshold:
                continue
            ok = True
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    if (di, dj) == (0, 0):
                        continue
                    a, b = i + di, j + dj
                    if not (0 <= a < H and 0 <= b < W):
                        continue
                    u = m[a, b]
                    if u > v or (u == v and (a, b) < (i, j)):
                        ok = False
            if ok:
                found.append((float(j), float(i), float(v)))
    return found


def zbuffer_oracle(tris, H, W):
    """Per-pixel point-in-triangle test plus nearest-z test.

    ``tris`` is a list of (3, 3) arrays with x, y in normalized image
    coordinates and z as depth. Returns the index of the visible triangle or -1.
    """
    out = np.full((H, W), -1)
    for i in range(H):
        y = (2 * i + 1) / H - 1
        for j in range(W):
            x = (2 * j + 1) / W - 1
            best = math.inf
            for t, tri in enumerate(tris):
                (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = tri
                det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
                if abs(det) < 1e-14:
                    continue
                l0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / det
                l1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / det
                l2 = 1 - l0 - l1
                if min(l0, l1, l2) < 0:
                    continue
                z = l0 * z0 + l1 * z1 + l2 * z2
                if z < best:
                    best, out[i, j] = z, t
    return out


def sphere_interior_distance(p, radius=1.0):
    return max(0.0, radius - float(np.linalg.norm(p)))


def box_interior_distance(p, lo, hi):
    p, lo, hi = (np.asarray(a, dtype=np.float64) for a in (p, lo, hi))
    return max(0.0, float(min((p - lo).min(), (hi - p).min())))


def oks_oracle(pred, gt, vis, area, sigmas):
    total, n = 0.0, 0
    for k in range(len(gt)):
        if not vis[k]:
            continue
        d2 = (pred[k][0] - gt[k][0]) ** 2 + (pred[k][1] - gt[k][1]) ** 2
        kappa = 2 * sigmas[k]
        total += math.exp(-d2 / (2 * area * kappa * kappa))
        n += 1
    return total / n if n else 0.0


def _interpolated_ap(labels, n_gt):
    """101-point interpolated precision: max precision at recall >= r, averaged over r."""
    if n_gt == 0:
        return None
    tp = fp = 0
    points = []
    for is_tp in labels:
        tp += is_tp
        fp += not is_tp
        points.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for k in range(101):
        r = k / 100
        cands = [p for rec, p in points if rec >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101


def exhaustive_ap(images, thresholds, sigmas):
    """AP for well-separated cases: enumerate every one-to-one assignment per image.

    For each threshold, the assignment that matches the most predictions above
    the OKS threshold is chosen, ties broken towards higher-scored predictions.
    Predictions are then ranked by score globally.
    """
    aps = []
    for thr in thresholds:
        labelled = []
        n_gt = 0
        for preds, gts in images:
            n_gt += len(gts)
            P, G = len(preds), len(gts)
            table = [[oks_oracle(p["keypoints"], g["keypoints"], g["visible"], g["area"], sigmas) for g in gts]
                     for p in preds]
            best_key, best_tp = None, [False] * P
            slots = list(range(G)) + [None] * P
            for assign in set(itertools.permutations(slots, P)):
                tp = [a is not None and table[k][a] >= thr for k, a in enumerate(assign)]
                key = (sum(tp), tuple(sorted((preds[k]["score"] for k in range(P) if tp[k]), reverse=True)))
                if best_key is None or key > best_key:
                    best_key, best_tp = key, tp
            for k in range(P):
                labelled.append((preds[k]["score"], best_tp[k]))
        labelled.sort(key=lambda x: -x[0])
        aps.append(_interpolated_ap([t for _, t in labelled], n_gt))
    valid = [a for a in aps if a is not None]
    return sum(valid) / len(valid) if valid else -1.0
