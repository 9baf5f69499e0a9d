"""Benchmark: compiled propagation kernel vs the NumPy fallback.

Times the per-frame affinity/top-k/vote step on a grid of realistic sizes
and verifies both implementations agree on every instance.

Run:  python3 benchmarks/bench_propagation.py
"""

import time

import numpy as np

from framepred import propagation as prop


def unit_rows(rng, shape):
    x = rng.standard_normal(shape).astype(np.float32)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def bench_case(grid, dim, sources, cfg, repeats=20):
    rows, cols = grid
    n = rows * cols
    rng = np.random.default_rng(0)
    tgt = unit_rows(rng, (n, dim))
    src = unit_rows(rng, (sources, n, dim))
    labels = rng.dirichlet(np.ones(4), size=(sources, n)).astype(np.float32)

    out_py = prop.propagate_frame(tgt, src, labels, grid, cfg, force_py=True)
    t0 = time.perf_counter()
    for _ in range(repeats):
        prop.propagate_frame(tgt, src, labels, grid, cfg, force_py=True)
    t_py = (time.perf_counter() - t0) / repeats

    if not prop.HAVE_EXTENSION:
        return t_py, None, True

    out_cy = prop.propagate_frame(tgt, src, labels, grid, cfg)
    t0 = time.perf_counter()
    for _ in range(repeats):
        prop.propagate_frame(tgt, src, labels, grid, cfg)
    t_cy = (time.perf_counter() - t0) / repeats
    agree = np.abs(out_py - out_cy).max() < 1e-5
    return t_py, t_cy, agree


def main():
    print(f"compiled extension available: {prop.HAVE_EXTENSION}")
    cases = [
        ((4, 4), 64, 4, prop.PropagationConfig(topk=7, radius=4, queue_len=8)),
        ((8, 8), 128, 9, prop.PropagationConfig(topk=7, radius=4, queue_len=8)),
        ((14, 14), 192, 9, prop.PropagationConfig(topk=7, radius=4,
                                                  queue_len=8)),
        ((14, 14), 384, 31, prop.DAVIS_PRESET),
        ((28, 28), 384, 31, prop.DAVIS_PRESET),
    ]
    header = f"{'grid':>8} {'dim':>5} {'srcs':>5} {'numpy ms':>10} " \
             f"{'cython ms':>10} {'speedup':>8} {'agree':>6}"
    print(header)
    print("-" * len(header))
    for grid, dim, sources, cfg in cases:
        t_py, t_cy, agree = bench_case(grid, dim, sources, cfg)
        if t_cy is None:
            print(f"{str(grid):>8} {dim:>5} {sources:>5} {t_py * 1e3:>10.2f} "
                  f"{'-':>10} {'-':>8} {'-':>6}")
        else:
            print(f"{str(grid):>8} {dim:>5} {sources:>5} {t_py * 1e3:>10.2f} "
                  f"{t_cy * 1e3:>10.2f} {t_py / t_cy:>7.1f}x "
                  f"{str(agree):>6}")


if __name__ == "__main__":
    main()
