"""Independent reference computations, written for clarity over speed.

None of these share code with the package: they are plain loops over the
defining formulas, used to derive expected values for the tests.
"""
import math
from fractions import Fraction

import numpy as np


def matmul_loops(a, b):
    M, K = a.shape
    K2, N = b.shape
    assert K == K2
    out = np.zeros((M, N), dtype=np.float64)
    for i in range(M):
        for j in range(N):
            s = 0.0
            for k in range(K):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def na_direct(q, k, v, window, padded=True):
    """Neighborhood attention for one head, ``[T, d]`` arrays, by definition.

    Padded: query t sees positions t-r..t+r, out-of-range keys/values are
    zero vectors (logit 0, contribution 0).  Clamped: the window is shifted
    to stay inside [0, T).
    """
    T, d = q.shape
    r = window // 2
    out = np.zeros((T, d))
    for t in range(T):
        if padded:
            idx = range(t - r, t + r + 1)
        else:
            start = min(max(t - r, 0), T - window)
            idx = range(start, start + window)
        logits, vals = [], []
        for j in idx:
            if 0 <= j < T:
                logits.append(float(np.dot(q[t], k[j])) / math.sqrt(d))
                vals.append(v[j].astype(np.float64))
            else:
                logits.append(0.0)
                vals.append(np.zeros(d))
        m = max(logits)
        w = [math.exp(x - m) for x in logits]
        z = sum(w)
        out[t] = sum(wi / z * vi for wi, vi in zip(w, vals))
    return out


def group_conv_loops(x, weight, bias, stride, groups):
    """``x`` [Cin, T], ``weight`` [Cout, Cin/g, k]."""
    cin, T = x.shape
    cout, cpg, ksz = weight.shape
    opg = cout // groups
    t_out = (T - ksz) // stride + 1
    y = np.zeros((cout, t_out))
    for o in range(cout):
        g = o // opg
        for t in range(t_out):
            s = 0.0 if bias is None else float(bias[o])
            for c in range(cpg):
                for j in range(ksz):
                    s += float(weight[o, c, j]) * float(x[g * cpg + c, t * stride + j])
            y[o, t] = s
    return y


def sweep(scores, labels):
    """Exact operating points at every distinct score plus +inf.

    Counts come from comparing every score against every threshold, so the
    cost is quadratic but nothing depends on sorting or cumulative sums.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    thresholds = np.append(np.unique(scores), np.inf)
    tar, non = scores[labels == 1], scores[labels == 0]
    miss = (tar[None, :] < thresholds[:, None]).sum(axis=1)
    fa = (non[None, :] >= thresholds[:, None]).sum(axis=1)
    return [(Fraction(int(m), tar.size), Fraction(int(f), non.size)) for m, f in zip(miss, fa)]


def eer_bruteforce(scores, labels):
    """EER in rational arithmetic: walk the operating points in threshold
    order and interpolate linearly across the first segment on which
    P_miss catches up with P_fa."""
    pts = sweep(scores, labels)
    if pts[0][0] >= pts[0][1]:
        return pts[0][0]
    for (m0, f0), (m1, f1) in zip(pts, pts[1:]):
        if m1 >= f1:
            d0, d1 = f0 - m0, f1 - m1
            a = d0 / (d0 - d1)
            return m0 + a * (m1 - m0)
    raise AssertionError("operating points never cross")


def min_dcf_bruteforce(scores, labels, p_target, c_miss=1, c_fa=1):
    p = Fraction(p_target)
    costs = [c_miss * p * m + c_fa * (1 - p) * f for m, f in sweep(scores, labels)]
    return min(costs) / min(c_miss * p, c_fa * (1 - p))


def hz_to_mel_htk(f):
    return 2595.0 * math.log10(1.0 + f / 700.0)
