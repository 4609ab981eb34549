"""Compare the numba and numpy implementations of every numeric kernel.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Both
backends get the same inputs; results are checked for equality before
timing, and numba is warmed up so compile time is excluded.
"""

import argparse
import math
import timeit

import numpy as np

from prmsearch import _kernels


def cases(rng):
    for k in (4, 64, 4096):
        values, visits = rng.random(k), rng.integers(1, 100, k).astype(np.float64)
        yield "ucb_argmax", k, (values, visits, math.log(5000), 1.414)
    for k in (30, 1000, 100_000):
        yield "quotas", k, (rng.integers(0, 100_000, k).astype(np.int64), 160_000)
    for groups in (8, 512, 20_000):
        flat, offsets = _kernels.ragged([rng.random(rng.integers(1, 12)) for _ in range(groups)])
        yield "group_stats", groups, (flat, offsets)
        yield "accumulated_argmax", groups, (flat, offsets, False)


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if "numba" not in _kernels.BACKENDS:
        raise SystemExit("numba is not importable; nothing to compare")
    numpy_k, numba_k = _kernels.BACKENDS["numpy"], _kernels.BACKENDS["numba"]
    rng = np.random.default_rng(args.seed)

    print(f"{'kernel':<20}{'size':>8}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, size, inputs in cases(rng):
        a, b = numpy_k[name](*inputs), numba_k[name](*inputs)  # also compiles numba
        if not same(a, b):
            raise SystemExit(f"{name} at size {size}: backends disagree ({a!r} vs {b!r})")
        number = max(1, 20_000 // size)
        t_np = min(timeit.repeat(lambda: numpy_k[name](*inputs), number=number, repeat=args.repeat)) / number
        t_nb = min(timeit.repeat(lambda: numba_k[name](*inputs), number=number, repeat=args.repeat)) / number
        print(f"{name:<20}{size:>8}{t_np * 1e6:>12.2f}{t_nb * 1e6:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
