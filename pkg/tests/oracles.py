"""Independent reference implementations used as test oracles.

Everything here is written with plain loops over scalars or sets and shares
no code with the package beyond the parameter containers.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


def naive_scan(x, A_log, D_skip, W_B, W_C, W_dt, dt_bias):
    """Per-step selective SSM recurrence on a single ``[L, D]`` sequence."""
    L, D = x.shape
    N = A_log.shape[1]
    y = np.zeros((L, D))
    h = np.zeros((D, N))
    for t in range(L):
        B = [sum(x[t, d] * W_B[d, n] for d in range(D)) for n in range(N)]
        C = [sum(x[t, d] * W_C[d, n] for d in range(D)) for n in range(N)]
        s = sum(x[t, d] * W_dt[d, 0] for d in range(D))
        for d in range(D):
            pre = dt_bias[d] + s
            dt = pre + math.log1p(math.exp(-pre)) if pre > 20 else math.log1p(math.exp(pre))
            acc = 0.0
            for n in range(N):
                a = -math.exp(A_log[d, n])
                z = dt * a
                abar = math.exp(z)
                coeff = dt * (1 + z / 2) if abs(z) < 1e-6 else math.expm1(z) / a
                h[d, n] = abar * h[d, n] + coeff * B[n] * x[t, d]
                acc += C[n] * h[d, n]
            y[t, d] = acc + D_skip[d] * x[t, d]
    return y


def knn_bruteforce(positions, anchor, k):
    """Indices of the ``k`` points nearest ``anchor``; ties by lowest index."""
    d = [((py - anchor[0]) ** 2 + (px - anchor[1]) ** 2, i) for i, (py, px) in enumerate(positions)]
    return sorted(i for _, i in sorted(d)[:k])


def cosine_loop(centers, points):
    out = np.zeros((len(centers), len(points)))
    for c, cv in enumerate(centers):
        for i, pv in enumerate(points):
            dot = sum(a * b for a, b in zip(cv, pv))
            nc = max(math.sqrt(sum(a * a for a in cv)), 1e-12)
            npt = max(math.sqrt(sum(b * b for b in pv)), 1e-12)
            out[c, i] = dot / (nc * npt)
    return out


def _instances(m):
    return {int(i): {(int(y), int(x)) for y, x in zip(*np.nonzero(m == i))} for i in np.unique(m) if i != 0}


def binary_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred) != 0, np.ravel(gt) != 0):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def binary_stats_oracle(pred, gt):
    tp, fp, fn, tn = binary_counts(pred, gt)

    def r(a, b):
        return 1.0 if b == 0 else a / b

    return {"miou": r(tp, tp + fp + fn), "dsc": r(2 * tp, 2 * tp + fp + fn),
            "acc": r(tp + tn, tp + tn + fp + fn), "sen": r(tp, tp + fn), "spe": r(tn, tn + fp)}


def ensemble_dice_oracle(pred, gt):
    a = {(y, x) for y, x in zip(*np.nonzero(pred))}
    b = {(y, x) for y, x in zip(*np.nonzero(gt))}
    return 1.0 if not a and not b else 2 * len(a & b) / (len(a) + len(b))


def pq_oracle(pred, gt):
    """Exhaustive pair enumeration with the IoU > 0.5 matching rule."""
    P, G = _instances(pred), _instances(gt)
    pairs = []
    for gi, gs in G.items():
        for pi, ps in P.items():
            iou = len(gs & ps) / len(gs | ps)
            if iou > 0.5:
                pairs.append(iou)
    tp = len(pairs)
    fp, fn = len(P) - tp, len(G) - tp
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dq = tp / (tp + fp / 2 + fn / 2)
    sq = sum(pairs) / tp if tp else 0.0
    return dq * sq, dq, sq


def aji_oracle(pred, gt):
    """Set-based AJI: gt in id order, each claims its max-IoU unused prediction (lowest id on ties)."""
    P, G = _instances(pred), _instances(gt)
    if not P and not G:
        return 1.0
    used = set()
    inter = union = 0
    for gi in sorted(G):
        gs = G[gi]
        best, best_iou = None, 0.0
        for pi in sorted(P):
            if pi in used:
                continue
            iou = len(gs & P[pi]) / len(gs | P[pi])
            if iou > best_iou:
                best, best_iou = pi, iou
        if best is None:
            union += len(gs)
        else:
            used.add(best)
            inter += len(gs & P[best])
            union += len(gs | P[best])
    union += sum(len(P[pi]) for pi in P if pi not in used)
    return 1.0 if union == 0 else inter / union


def boundary_oracle(mask):
    m = np.asarray(mask) != 0
    H, W = m.shape
    pts = []
    for y in range(H):
        for x in range(W):
            if not m[y, x]:
                continue
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if not (0 <= ny < H and 0 <= nx < W) or not m[ny, nx]:
                    pts.append((y, x))
                    break
    return pts


def _percentile_linear(vals, q):
    v = sorted(vals)
    pos = (len(v) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def hd95_oracle(pred, gt):
    """All-pairs boundary distances."""
    bp, bg = boundary_oracle(pred), boundary_oracle(gt)

    def directed(src, dst):
        return _percentile_linear([min(math.hypot(a - c, b - d) for c, d in dst) for a, b in src], 95)

    return max(directed(bp, bg), directed(bg, bp))


def count_components(mask):
    """4-connected flood fill component count."""
    m = np.asarray(mask) != 0
    seen = np.zeros_like(m)
    H, W = m.shape
    count = 0
    for y in range(H):
        for x in range(W):
            if m[y, x] and not seen[y, x]:
                count += 1
                q = deque([(y, x)])
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < H and 0 <= nx < W and m[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
    return count


def geodesic_nearest_marker(markers, mask, passable):
    """Label every mask pixel with its nearest marker by BFS distance through ``passable``.

    Pixels outside ``passable`` (ridge pixels) are filled afterwards by a
    second BFS from the labelled region. Ties go to the lower label.
    """
    H, W = mask.shape
    INF = 10 ** 9
    best = np.full((H, W), INF)
    lab = np.zeros((H, W), dtype=np.int64)
    for m in sorted(set(np.unique(markers)) - {0}):
        dist = np.full((H, W), INF)
        q = deque()
        for y, x in zip(*np.nonzero(markers == m)):
            dist[y, x] = 0
            q.append((y, x))
        while q:
            y, x = q.popleft()
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and passable[ny, nx] and dist[ny, nx] == INF:
                    dist[ny, nx] = dist[y, x] + 1
                    q.append((ny, nx))
        better = dist < best
        best[better] = dist[better]
        lab[better] = m
    return lab
