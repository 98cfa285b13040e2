"""Pure-numpy reference kernels."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w, b):
    # x: (n, cin, lin), w: (cout, cin, k) -> (n, cout, lin - k + 1)
    k = w.shape[2]
    win = sliding_window_view(x, k, axis=2)  # (n, cin, lout, k)
    return np.einsum("nclk,ock->nol", win, w) + b[None, :, None]


def conv1d_backward(x, w, gout):
    k = w.shape[2]
    win = sliding_window_view(x, k, axis=2)
    gw = np.einsum("nclk,nol->ock", win, gout)
    gb = gout.sum(axis=(0, 2))
    gx = np.zeros_like(x)
    lout = gout.shape[2]
    for j in range(k):
        gx[:, :, j:j + lout] += np.einsum("nol,oc->ncl", gout, w[:, :, j])
    return gx, gw, gb


def maxpool1d_forward(x, width):
    n, c, lin = x.shape
    lout = (lin - width) // width + 1
    win = x[:, :, :lout * width].reshape(n, c, lout, width)
    # argmax returns the first maximum: ties route to the lowest index
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    return out, arg + np.arange(lout)[None, None, :] * width


def maxpool1d_backward(gout, idx, lin):
    n, c, _ = gout.shape
    gx = np.zeros((n, c, lin))
    np.put_along_axis(gx, idx, gout, axis=2)
    return gx


def rank_penalty(rank_a, rank_b, k):
    """Sum of (rank_b - k) over off-diagonal pairs with rank_a <= k < rank_b."""
    sel = (rank_a <= k) & (rank_b > k) & (rank_a > 0)
    return int((rank_b[sel] - k).sum())
