"""Time the numba and numpy kernel backends on scene-sized rasters.

    python3 benchmarks/bench_kernels.py --size 5000 --repeats 3

Both backends are imported side by side (``*_nb`` / ``*_np``), checked for
identical output, and timed after one warm-up call so JIT compilation is
not counted.
"""
import argparse
import time

import numpy as np

from seaice import kernels


def _star(n, cx, cy, radius, rng):
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = radius * rng.uniform(0.5, 1.0, n)
    return cx + rad * np.cos(ang), cy + rad * np.sin(ang)


def make_inputs(size, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, (size, size))
    pred = rng.integers(0, 2, (size, size))
    valid = rng.random((size, size)) < 0.9
    channels = rng.normal(size=(3, size, size)).astype(np.float32)
    rings = [_star(64, *rng.uniform(0.2, 0.8, 2) * size, rng.uniform(0.05, 0.2) * size, rng) for _ in range(20)]
    xs = np.concatenate([r[0] for r in rings])
    ys = np.concatenate([r[1] for r in rings])
    starts = np.cumsum([0] + [len(r[0]) for r in rings]).astype(np.int64)
    return {
        "confusion_counts": lambda f: f(labels, pred, valid, 2),
        "masked_moments": lambda f: f(channels, valid),
        "error_codes": lambda f: f(pred, labels, valid),
        "fill_polygon": lambda f: f(
            np.full((size, size), 255, np.uint8), np.zeros((size, size), bool), xs, ys, starts, np.uint8(1)
        ),
    }


def best_time(call, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        call()
        times.append(time.perf_counter() - t0)
    return min(times)


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.allclose(x, y, rtol=1e-9) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=2000, help="raster edge length in pixels")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cases = make_inputs(args.size, args.seed)
    print(f"{args.size}x{args.size} raster, best of {args.repeats}")
    print(f"{'kernel':<18}{'numba [s]':>12}{'numpy [s]':>12}{'speedup':>10}")
    for name, run in cases.items():
        nb = getattr(kernels, f"{name}_nb")
        npy = getattr(kernels, f"{name}_np")
        if not _same(run(nb), run(npy)):  # also warms up the JIT
            raise SystemExit(f"{name}: backends disagree")
        t_nb = best_time(lambda: run(nb), args.repeats)
        t_np = best_time(lambda: run(npy), args.repeats)
        print(f"{name:<18}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
