"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the attack workload: 512-point clouds, 256 pooled channels,
batches of 32 for pooling and single clouds for the distance kernels.
"""

import argparse
import timeit

import numpy as np

from critpoint import _kernels


def cases(rng):
    feats = rng.standard_normal((32, 512, 256))
    a, b = rng.standard_normal((512, 3)), rng.standard_normal((512, 3))
    return [
        ("pool_max", lambda be: _kernels.pool_max(feats, backend=be)),
        ("pool_median", lambda be: _kernels.pool_median(feats, backend=be)),
        ("nearest", lambda be: _kernels.nearest(a, b, backend=be)),
        ("knn_mean_distance", lambda be: _kernels.knn_mean_distance(a, 8, backend=be)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not _kernels.USE_NUMBA:
        print("numba unavailable or disabled; only the numpy column is meaningful")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in cases(rng):
        fn("numba")  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn("numpy"), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn("numba"), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
