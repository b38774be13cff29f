"""Independent reference implementations used as test oracles.

Everything here is written straight from the mathematical definition,
favoring the dumbest possible loops over any shared code with the
package. Keep it that way: these exist to disagree with the package when
the package is wrong.
"""

import numpy as np


def conv2d_ref(x, w, b=None, stride=1, padding=0, dilation=1, groups=1):
    """Definition-level convolution: explicit loops over every output element."""
    n, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    og = c_out // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    w_out = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)
    for ni in range(n):
        for co in range(c_out):
            g = co // og
            for ho in range(h_out):
                for wo in range(w_out):
                    acc = 0.0
                    for ci in range(c_in_g):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (xp[ni, g * c_in_g + ci,
                                           ho * stride + i * dilation,
                                           wo * stride + j * dilation]
                                        * w[co, ci, i, j])
                    out[ni, co, ho, wo] = acc + (b[co] if b is not None else 0.0)
    return out


def adamw_ref(p0, grads, lr, b1, b2, eps, wd):
    """Scalar AdamW reference: replays the update equations step by step."""
    p = float(p0)
    m = 0.0
    v = 0.0
    for t, g in enumerate(grads, start=1):
        p = p * (1.0 - lr * wd)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mh = m / (1.0 - b1 ** t)
        vh = v / (1.0 - b2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


def connected_components_ref(mask):
    """8-connected components by explicit flood fill. Returns a label image
    with components numbered 1.. in raster order of their first pixel."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    nxt = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or labels[sy, sx]:
                continue
            nxt += 1
            stack = [(sy, sx)]
            labels[sy, sx] = nxt
            while stack:
                y, x = stack.pop()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not labels[yy, xx]:
                            labels[yy, xx] = nxt
                            stack.append((yy, xx))
    return labels, nxt


def average_precision_ref(scores, labels):
    """AP as the precision-weighted sum over the exact ranked list, with tied
    scores collapsed into groups (precision evaluated once per group at the
    group's end). Computed with sorted python floats, no binning."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    s = np.asarray(scores, dtype=np.float64)[order]
    y = np.asarray(labels)[order].astype(np.int64)
    total_pos = int(y.sum())
    if total_pos == 0:
        return 0.0
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    n = len(y)
    while i < n:
        j = i
        while j < n and s[j] == s[i]:
            j += 1
        grp_pos = int(y[i:j].sum())
        tp += grp_pos
        seen = j
        if grp_pos:
            ap += (tp / seen) * grp_pos
        i = j
    return ap / total_pos
