"""Time the numba kernels against their pure-numpy twins.

    python benchmarks/bench_kernels.py [--sizes 256,2048] [--repeat 5]

Each row reports the best-of-``repeat`` wall time per call.  The numba
column excludes compilation (one warm-up call first).  Outputs of the two
backends are checked for equality before timing.
"""

import argparse
import time

import numpy as np

from pmpnet import _accel, kernels
from pmpnet.losses import eps_schedule


def best_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(n, rng):
    pts = rng.uniform(-0.45, 0.45, size=(n, 3))
    s = max(n // 4, 1)
    centers = pts[kernels.fps_np(pts, s)]
    m = min(n, 256)
    cost = np.linalg.norm(pts[:m, None] - rng.uniform(-0.45, 0.45, size=(m, 3))[None], axis=-1)
    sched = eps_schedule(cost.max(), m)
    return [
        (f"fps n={n} s={s}", lambda k: k(pts, s), "fps"),
        (f"ball_query n={n} s={s} m=32", lambda k: k(pts, centers, 0.2 ** 2, 32), "ball_query"),
        (f"knn n={n} k=3", lambda k: k(pts, centers, 3), "knn"),
        (f"auction n={m}", lambda k: k(cost, sched, 50), "auction"),
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="256,2048")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for n in (int(s) for s in args.sizes.split(",")):
        for label, call, name in cases(n, rng):
            nb, np_ = getattr(kernels, f"{name}_nb"), getattr(kernels, f"{name}_np")
            a, b = call(nb), call(np_)
            same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
            if not same:
                raise SystemExit(f"backends disagree on {label}")
            t_nb = best_time(lambda: call(nb), args.repeat)
            t_np = best_time(lambda: call(np_), args.repeat)
            print(f"{label:34s} {t_nb * 1e3:10.3f} {t_np * 1e3:10.3f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
