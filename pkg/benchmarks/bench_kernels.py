"""Time the numba kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match the training loop: one encoder conv layer on a batch of 35
per-BS inputs, single-sample inference, and the rank penalty behind CT/TW
on 255 and 1000 points. The last rows time one training epoch end to end.
"""
import argparse
import time

import numpy as np

from ccloc import charting, kernels, metrics
from ccloc.dataset import Scaler


def best_of(fn, repeat):
    fn()  # warm-up (numba compiles on first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    x = rng.standard_normal((35, 8, 23))
    w = rng.standard_normal((16, 8, 3))
    b = rng.standard_normal(16)
    g = rng.standard_normal((35, 16, 21))
    x1 = x[:1].copy()
    pool_in = rng.standard_normal((35, 16, 21))
    out, idx = kernels.maxpool1d_forward(pool_in, 2)
    ranks = {n: (metrics.rank_neighbors(rng.standard_normal((n, 3))),
                 metrics.rank_neighbors(rng.standard_normal((n, 3)))) for n in (255, 1000)}
    return {
        "conv1d fwd  35x8x23 -> 16": lambda: kernels.conv1d_forward(x, w, b),
        "conv1d fwd  1x8x23 -> 16": lambda: kernels.conv1d_forward(x1, w, b),
        "conv1d bwd  35x8x23 -> 16": lambda: kernels.conv1d_backward(x, w, g),
        "maxpool fwd 35x16x21": lambda: kernels.maxpool1d_forward(pool_in, 2),
        "maxpool bwd 35x16x21": lambda: kernels.maxpool1d_backward(out, idx, 21),
        "rank penalty n=255 K=10": lambda: kernels.rank_penalty(*ranks[255], 10),
        "rank penalty n=1000 K=10": lambda: kernels.rank_penalty(*ranks[1000], 10),
    }


def epoch_case(rng):
    n_u, n_l = 1190, 510
    Xu = rng.standard_normal((n_u, 4, 25))
    Xl = rng.standard_normal((n_l, 4, 25))
    yl = rng.uniform(0.05, 0.95, (n_l, 3))
    scaler = Scaler(np.zeros((4, 25)), np.ones((4, 25)), np.zeros(3), np.ones(3))
    cfg = charting.TrainConfig(epochs=1)

    def run():
        model = charting.init_model(4, 25, seed=0, scaler=scaler)
        charting._run(model, Xu, Xl, yl, cfg, supervised=True, unsupervised=True)
    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rows = []
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            for label, fn in cases(np.random.default_rng(0)).items():
                rows.append((label, name, best_of(fn, args.repeat)))
            rows.append(("semi-supervised epoch (desk size)", name,
                         best_of(epoch_case(np.random.default_rng(0)), max(1, args.repeat // 10))))
    by_case = {}
    for label, name, t in rows:
        by_case.setdefault(label, {})[name] = t
    print(f"{'case':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speed-up':>9s}")
    for label, t in by_case.items():
        npy, nb = t.get("numpy"), t.get("numba")
        ratio = f"{npy / nb:8.1f}x" if npy and nb else "      n/a"
        print(f"{label:36s} {1e3 * npy:10.3f} {1e3 * nb if nb else float('nan'):10.3f} {ratio}")


if __name__ == "__main__":
    main()
