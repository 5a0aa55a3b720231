"""Independent scalar reference implementations used as test oracles.

Everything here is written with explicit Python loops over plain floats so
that it shares no code path with the vectorised kernels under test.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - padding
                                s = j * stride + v - padding
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += float(x[a, c, r, s]) * float(w[o, c, u, v])
                    out[a, o, i, j] = acc
    return out


def maxpool_loops(x, window, stride):
    n, c, h, w = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for k in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -math.inf
                    for u in range(window):
                        for v in range(window):
                            val = float(x[a, k, i * stride + u, j * stride + v])
                            if val > best:
                                best = val
                    out[a, k, i, j] = best
    return out


def bilinear_point(img, y, x):
    """Align-corners bilinear sample of a 2-D list/array at fractional (y, x)."""
    h, w = len(img), len(img[0])
    y0 = min(int(math.floor(y)), h - 1)
    x0 = min(int(math.floor(x)), w - 1)
    y1 = min(y0 + 1, h - 1)
    x1 = min(x0 + 1, w - 1)
    dy = y - y0
    dx = x - x0
    top = float(img[y0][x0]) * (1 - dx) + float(img[y0][x1]) * dx
    bot = float(img[y1][x0]) * (1 - dx) + float(img[y1][x1]) * dx
    return top * (1 - dy) + bot * dy


def upsample_loops(x, out_h, out_w):
    n, c, h, w = x.shape
    sy = (h - 1) / (out_h - 1) if out_h > 1 else 0.0
    sx = (w - 1) / (out_w - 1) if out_w > 1 else 0.0
    out = np.zeros((n, c, out_h, out_w))
    for a in range(n):
        for k in range(c):
            img = x[a, k]
            for i in range(out_h):
                for j in range(out_w):
                    out[a, k, i, j] = bilinear_point(img, i * sy, j * sx)
    return out


def cross_entropy_loops(logits, labels, ignore_index=None):
    n, c, h, w = logits.shape
    total, count = 0.0, 0
    for a in range(n):
        for i in range(h):
            for j in range(w):
                lab = int(labels[a, i, j])
                if ignore_index is not None and lab == ignore_index:
                    continue
                vals = [float(logits[a, k, i, j]) for k in range(c)]
                m = max(vals)
                lse = m + math.log(sum(math.exp(v - m) for v in vals))
                total += lse - vals[lab]
                count += 1
    return total / max(count, 1)


def confusion_tally(pred, gt, num_classes):
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        cm[g][p] += 1
    return np.array(cm, dtype=np.int64)


def miou_scalar(cm):
    cm = [[int(v) for v in row] for row in cm]
    c = len(cm)
    ious = []
    for k in range(c):
        inter = cm[k][k]
        row = sum(cm[k])
        col = sum(cm[r][k] for r in range(c))
        union = row + col - inter
        if union == 0:
            continue
        ious.append(inter / union)
    return sum(ious) / len(ious)


def atr_scalar(cm, background=0):
    cm = [[int(v) for v in row] for row in cm]
    c = len(cm)
    total = sum(sum(r) for r in cm)
    acc = sum(cm[k][k] for k in range(c)) / total
    fg_gt = sum(sum(cm[k]) for k in range(c) if k != background)
    fg_hit = sum(cm[k][k] for k in range(c) if k != background)
    fg_acc = fg_hit / fg_gt if fg_gt else float("nan")
    precs, recs, f1s = [], [], []
    for k in range(c):
        if k == background:
            continue
        tp = cm[k][k]
        col = sum(cm[r][k] for r in range(c))
        row = sum(cm[k])
        if row == 0 and col == 0:
            continue
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        precs.append(p)
        recs.append(r)
        f1s.append(f)
    if not precs:
        return acc, fg_acc, float("nan"), float("nan"), float("nan")
    return acc, fg_acc, sum(precs) / len(precs), sum(recs) / len(recs), sum(f1s) / len(f1s)
