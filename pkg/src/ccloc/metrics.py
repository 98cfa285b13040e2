"""Neighbourhood-preservation metrics (continuity, trustworthiness) and error CDFs."""
import csv
import json

import numpy as np

from . import kernels


def pairwise_distances(points):
    p = np.asarray(points, dtype=float)
    if p.ndim != 2:
        raise ValueError(f"expected an (n, d) point array, got shape {p.shape}")
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt(np.einsum("abk,abk->ab", diff, diff))


def rank_neighbors(points):
    """``r[a, b]`` = rank of b among a's neighbours (1 = nearest); ``r[a, a] = 0``.

    Equal distances are ordered by ascending point index.
    """
    d = pairwise_distances(points)
    n = len(d)
    if n < 2:
        raise ValueError("need at least two points")
    np.fill_diagonal(d, -1.0)
    order = np.argsort(d, axis=1, kind="stable")
    ranks = np.empty((n, n), dtype=np.int64)
    np.put_along_axis(ranks, order, np.arange(n)[None, :].repeat(n, 0), axis=1)
    return ranks


def _check(true_pts, latent_pts, k):
    n = len(true_pts)
    if len(latent_pts) != n:
        raise ValueError(f"point sets differ in size: {n} vs {len(latent_pts)}")
    if int(k) != k or k < 1 or 2 * n - 3 * k - 1 <= 0:
        raise ValueError(f"K={k} out of range for n={n} (need 1 <= K and 2n - 3K - 1 > 0)")
    return n


def _score(penalty, n, k):
    return 1.0 - 2.0 * penalty / (n * k * (2 * n - 3 * k - 1))


def continuity(true_pts, latent_pts, k, ranks=None):
    """1 minus the normalised latent-rank excess of true neighbours lost in the chart."""
    n = _check(true_pts, latent_pts, k)
    rt, rl = ranks if ranks is not None else (rank_neighbors(true_pts), rank_neighbors(latent_pts))
    return _score(kernels.rank_penalty(rt, rl, int(k)), n, k)


def trustworthiness(true_pts, latent_pts, k, ranks=None):
    """1 minus the normalised true-rank excess of false neighbours introduced by the chart."""
    n = _check(true_pts, latent_pts, k)
    rt, rl = ranks if ranks is not None else (rank_neighbors(true_pts), rank_neighbors(latent_pts))
    return _score(kernels.rank_penalty(rl, rt, int(k)), n, k)


def valid_ks(n, ks):
    return [int(k) for k in ks if 1 <= k and 2 * n - 3 * k - 1 > 0]


def ct_tw_curves(true_pts, latent_pts, ks):
    """Lists of (K, CT) and (K, TW) for every valid K in ``ks`` (ranks computed once)."""
    ranks = (rank_neighbors(true_pts), rank_neighbors(latent_pts))
    ks = valid_ks(len(true_pts), ks)
    ct = [(k, continuity(true_pts, latent_pts, k, ranks)) for k in ks]
    tw = [(k, trustworthiness(true_pts, latent_pts, k, ranks)) for k in ks]
    return ct, tw


def error_cdf(pred, truth, threshold=2.0):
    """Sorted per-sample Euclidean errors with the i/n empirical CDF and summary stats."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if len(pred) < 1:
        raise ValueError("need at least one sample")
    err = np.sort(np.linalg.norm(pred - truth, axis=1))
    n = len(err)
    cdf = np.arange(1, n + 1) / n
    return {
        "errors": err.tolist(),
        "cdf": cdf.tolist(),
        "median": float(np.median(err)),
        "p90": float(np.percentile(err, 90)),
        "mean": float(err.mean()),
        "p_below": float(np.mean(err < threshold)),
        "threshold": float(threshold),
        "n": n,
    }


def chart_report(ct_curve, tw_curve, cdf, extra=None):
    rep = {"ct_curve": [list(p) for p in ct_curve], "tw_curve": [list(p) for p in tw_curve],
           "error_cdf": cdf}
    rep.update(extra or {})
    return rep


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curves_csv(report, path, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["K", "CT", "TW"])
        for (k, ct), (_, tw) in zip(report["ct_curve"], report["tw_curve"]):
            w.writerow([k, repr(ct), repr(tw)])


def write_cdf_csv(report, path, comment=None):
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["error", "cdf"])
        for e, c in zip(report["error_cdf"]["errors"], report["error_cdf"]["cdf"]):
            w.writerow([repr(e), repr(c)])
