"""Loop kernels compiled with numba. Same contracts as ``_numpy``."""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def conv1d_forward(x, w, b):
    n, cin, lin = x.shape
    cout, _, k = w.shape
    lout = lin - k + 1
    out = np.empty((n, cout, lout))
    for s in range(n):
        for o in range(cout):
            for t in range(lout):
                acc = b[o]
                for c in range(cin):
                    for j in range(k):
                        acc += x[s, c, t + j] * w[o, c, j]
                out[s, o, t] = acc
    return out


@njit(cache=True, nogil=True)
def conv1d_backward(x, w, gout):
    n, cin, lin = x.shape
    cout, _, k = w.shape
    lout = gout.shape[2]
    gx = np.zeros((n, cin, lin))
    gw = np.zeros((cout, cin, k))
    gb = np.zeros(cout)
    for s in range(n):
        for o in range(cout):
            for t in range(lout):
                g = gout[s, o, t]
                gb[o] += g
                for c in range(cin):
                    for j in range(k):
                        gw[o, c, j] += g * x[s, c, t + j]
                        gx[s, c, t + j] += g * w[o, c, j]
    return gx, gw, gb


@njit(cache=True, nogil=True)
def maxpool1d_forward(x, width):
    n, c, lin = x.shape
    lout = (lin - width) // width + 1
    out = np.empty((n, c, lout))
    idx = np.empty((n, c, lout), dtype=np.int64)
    for s in range(n):
        for ch in range(c):
            for t in range(lout):
                best = t * width
                for j in range(1, width):
                    # strict '>' keeps the lowest index on ties
                    if x[s, ch, t * width + j] > x[s, ch, best]:
                        best = t * width + j
                out[s, ch, t] = x[s, ch, best]
                idx[s, ch, t] = best
    return out, idx


@njit(cache=True, nogil=True)
def maxpool1d_backward(gout, idx, lin):
    n, c, lout = gout.shape
    gx = np.zeros((n, c, lin))
    for s in range(n):
        for ch in range(c):
            for t in range(lout):
                gx[s, ch, idx[s, ch, t]] += gout[s, ch, t]
    return gx


@njit(cache=True, nogil=True)
def rank_penalty(rank_a, rank_b, k):
    n = rank_a.shape[0]
    total = 0
    for i in range(n):
        for j in range(n):
            ra = rank_a[i, j]
            if ra > 0 and ra <= k and rank_b[i, j] > k:
                total += rank_b[i, j] - k
    return total
