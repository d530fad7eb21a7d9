"""Brute-force reference implementations used only by the tests.

Nothing here imports the code under test except plain data containers.
"""

from __future__ import annotations

import math

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Seven nested loops straight from the dilated-convolution sum."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for ni in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for cc in range(ci):
                        for a in range(k):
                            for bb in range(k):
                                r = i * stride + dilation * a - padding
                                q = j * stride + dilation * bb - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += w[o, cc, a, bb] * x[ni, cc, r, q]
                    out[ni, o, i, j] = acc
    return out


def naive_maxpool(x, k, stride=1, padding=0):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.empty((n, c, ho, wo))
    for ni in range(n):
        for cc in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -math.inf
                    for a in range(k):
                        for bb in range(k):
                            r, q = i * stride + a - padding, j * stride + bb - padding
                            if 0 <= r < h and 0 <= q < w:
                                best = max(best, x[ni, cc, r, q])
                    out[ni, cc, i, j] = best
    return out


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def silu(v):
    return v * sigmoid(v)


def raster_iou_fraction(a, b):
    """(intersection, union) unit-cell counts for integer boxes."""
    xs = range(min(a[0], b[0]), max(a[2], b[2]))
    ys = range(min(a[1], b[1]), max(a[3], b[3]))
    inter = union = 0
    for x in xs:
        for y in ys:
            in_a = a[0] <= x < a[2] and a[1] <= y < a[3]
            in_b = b[0] <= x < b[2] and b[1] <= y < b[3]
            inter += in_a and in_b
            union += in_a or in_b
    return inter, union


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def brute_nms(dets, iou_thresh, conf_thresh):
    """O(n^2) suppression: a det survives iff no better-ranked survivor of its class overlaps it."""
    cand = [(i, d) for i, d in enumerate(dets) if d.score >= conf_thresh]
    rank = sorted(cand, key=lambda p: (-p[1].score, p[1].class_id, p[0]))
    alive = []
    for i, d in rank:
        suppressed = False
        for _, k in alive:
            if k.class_id == d.class_id and _iou(k.box, d.box) > iou_thresh:
                suppressed = True
        if not suppressed:
            alive.append((i, d))
    return [d for _, d in alive]


def all_points_ap(tp_flags, n_gt):
    """Exact area under the monotone precision envelope (all-points interpolation)."""
    tp = fp = 0
    pts = []
    for f in tp_flags:
        tp += f
        fp += not f
        pts.append((tp / n_gt, tp / (tp + fp)))
    area, prev_r = 0.0, 0.0
    for idx, (r, _) in enumerate(pts):
        if r > prev_r:
            env = max(p for rr, p in pts[idx:])
            area += (r - prev_r) * env
            prev_r = r
    return area


def ap101(tp_flags, n_gt):
    tp = fp = 0
    pts = []
    for f in tp_flags:
        tp += f
        fp += not f
        pts.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for i in range(101):
        r = i / 100
        cands = [p for rr, p in pts if rr >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / 101


def brute_evaluate(dets_per_image, gts_per_image):
    """Independent evaluator following the documented protocol, loop by loop."""
    classes = sorted({c for gts in gts_per_image for c, _ in gts})
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    ap = {c: [] for c in classes}
    pr = {}
    ious_tp = []
    for ti, t in enumerate(thresholds):
        for c in classes:
            n_gt = sum(1 for gts in gts_per_image for cc, _ in gts if cc == c)
            entries = []
            for img, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
                order = sorted(range(len(dets)), key=lambda k: (-dets[k].score, k))
                used = [False] * len(gts)
                for rank, k in enumerate(order):
                    d = dets[k]
                    best, bj = -1.0, -1
                    for j, (gc, gb) in enumerate(gts):
                        if used[j] or gc != d.class_id:
                            continue
                        v = _iou(d.box, gb)
                        if v >= t and v > best:
                            best, bj = v, j
                    if bj >= 0:
                        used[bj] = True
                    if d.class_id == c:
                        entries.append((-d.score, img, rank, bj >= 0))
                    if ti == 0 and bj >= 0 and c == classes[0]:
                        ious_tp.append(best)
            entries.sort()
            flags = [e[3] for e in entries]
            ap[c].append(ap101(flags, n_gt))
            if ti == 0:
                best_f1, best_pr = -1.0, (0.0, 0.0)
                tp = 0
                for i, f in enumerate(flags, start=1):
                    tp += f
                    p, r = tp / i, tp / n_gt
                    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
                    if f1 > best_f1:
                        best_f1, best_pr = f1, (p, r)
                pr[c] = best_pr
    return {
        "map50": sum(ap[c][0] for c in classes) / len(classes),
        "map50_95": sum(sum(ap[c]) / len(ap[c]) for c in classes) / len(classes),
        "precision": sum(pr[c][0] for c in classes) / len(classes),
        "recall": sum(pr[c][1] for c in classes) / len(classes),
        "mean_iou": sum(ious_tp) / len(ious_tp) if ious_tp else 0.0,
    }
