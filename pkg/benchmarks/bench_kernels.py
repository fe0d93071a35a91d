"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same inputs through both backends; results are
checked for agreement before timing. Prints one line per kernel with the
median time per call and the speed-up.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from gcrl import _core_py

try:
    from gcrl import _core
except ImportError:  # pragma: no cover - depends on the build
    _core = None


def cases(rng):
    n, m = 64, 400
    us, vs = rng.integers(0, n, m), rng.integers(0, n, m)
    order = rng.permutation(m)
    yield "greedy_dagify (n=64, 400 edges)", "greedy_dagify", (n, us, vs, order)

    b = 64
    v = rng.normal(size=b)
    eu, ev = rng.integers(0, b, 150), rng.integers(0, b, 150)
    yield "penalty_gd (B=64, 150 edges, 3 steps)", "penalty_gd", (v.copy(), v, eu, ev, 0.05, 100.0, 0.0, 1e-3, 3)

    z = rng.normal(size=(4, 6, 6))
    yield "sinkhorn_stack (4 x 6x6, 20 rounds)", "sinkhorn_stack", (z, 20, 1.0, 1e-300, 20)

    k, d, a = 4, 13, 3
    w = rng.normal(size=(k, d, d)) * 0.3
    p = rng.random(size=(k, a, a))
    i, j = np.divmod(np.arange(k * k), k)
    yield "group_regs (K=4, d=13)", "group_regs", (w, p, i, j, (4,))


def _agree(x, y) -> bool:
    if isinstance(x, tuple):
        return all(_agree(a, b) for a, b in zip(x, y))
    if np.isscalar(x) or np.ndim(x) == 0:
        return bool(np.isclose(float(x), float(y), rtol=1e-9, atol=1e-12))
    return bool(np.allclose(np.asarray(x), np.asarray(y), rtol=1e-9, atol=1e-12))


def bench(fn, args, repeat: int) -> float:
    copies = lambda: tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args)  # noqa: E731
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*copies()), number=1), 1e-7)))
    times = timeit.repeat(lambda: fn(*copies()), number=number, repeat=repeat)
    return float(np.median(times)) / number


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if _core is None:
        print("compiled kernels are not built; run `python3 setup.py build_ext --inplace`")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<42}{'cython':>12}{'numpy':>12}{'speed-up':>10}")
    for label, name, inputs in cases(rng):
        fast, slow = getattr(_core, name), getattr(_core_py, name)
        if not _agree(fast(*inputs), slow(*inputs)):
            print(f"{label}: backends disagree")
            return 1
        t_fast, t_slow = bench(fast, inputs, args.repeat), bench(slow, inputs, args.repeat)
        print(f"{label:<42}{t_fast * 1e6:>10.1f}us{t_slow * 1e6:>10.1f}us{t_slow / t_fast:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
