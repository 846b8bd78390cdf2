"""Compiled vs pure-Python kernels: timings and a bit-identity check.

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 100,500,2000] [--dims 16,32,64]

Both backends accumulate in the same order, so every output is compared
with ``np.array_equal`` as well as timed.
"""

import argparse
import sys
import timeit

import numpy as np

from incline import kernels, linalg


def _best(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def bench_case(n, d, repeat, rng):
    S = rng.standard_normal((n, d))
    T = rng.standard_normal((n, d))
    G = S.T @ S + n * np.eye(d)
    tol = 10 * d * np.finfo(float).eps * G.diagonal().max()
    rows = []
    outs = {}
    for name in ("cython", "python"):
        k = kernels.get_backend(name)
        L, _ = k.cholesky(G, tol)
        cases = {
            "gram": lambda: k.gram(S),
            "cross_gram": lambda: k.cross_gram(S, T),
            "cholesky": lambda: k.cholesky(G, tol),
            "cho_solve": lambda: k.cho_solve(L, T.T @ S),
        }
        outs[name] = {key: fn() for key, fn in cases.items()}
        for key, fn in cases.items():
            rows.append((key, name, _best(fn, repeat)))
    same = all(
        np.array_equal(outs["cython"][k][0] if k == "cholesky" else outs["cython"][k],
                       outs["python"][k][0] if k == "cholesky" else outs["python"][k])
        for k in outs["cython"]
    )
    return rows, same


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--sizes", default="100,500,2000")
    ap.add_argument("--dims", default="16,32,64")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if kernels.compiled is None:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'N':>6} {'d':>4} {'kernel':<11} {'cython_s':>11} {'python_s':>11} {'speedup':>8} identical")
    ok = True
    for n in (int(x) for x in args.sizes.split(",")):
        for d in (int(x) for x in args.dims.split(",")):
            rows, same = bench_case(n, d, args.repeat, rng)
            ok &= same
            times = {}
            for key, name, t in rows:
                times.setdefault(key, {})[name] = t
            for key, t in times.items():
                print(
                    f"{n:>6} {d:>4} {key:<11} {t['cython']:>11.3e} {t['python']:>11.3e} "
                    f"{t['python'] / t['cython']:>7.1f}x {'yes' if same else 'NO'}"
                )
    # end-to-end fit through the public API with the active backend
    S = rng.standard_normal((500, 32))
    T = S @ rng.standard_normal((32, 32))
    t = _best(lambda: linalg.fit_linear_map(S, T), args.repeat)
    print(f"fit_linear_map N=500 d=32 ({kernels.BACKEND}): {t:.3e} s")
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
