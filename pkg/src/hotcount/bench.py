"""Compiled vs pure-Python kernel timings."""

from __future__ import annotations

import time

import numpy as np

from hotcount import _pykernels
from hotcount.sketch import hash_seeds


def _backends():
    out = {"python": _pykernels}
    try:
        from hotcount import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


def _best_of(fn, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def run_kernel_benchmark(n_keys: int = 200_000, width: int = 1 << 16, depth: int = 5,
                         verbose: bool = True) -> dict[str, dict[str, float]]:
    """Seconds per operation class for each available backend.

    Also checks that all backends produce identical grids and estimates.
    """
    rng = np.random.default_rng(0)
    keys = [f"user-{i}".encode() for i in rng.integers(0, n_keys // 4, n_keys)]
    deltas = rng.random(n_keys)
    rows, signs = hash_seeds(1, depth)
    results: dict[str, dict[str, float]] = {}
    grids = {}
    for name, mod in _backends().items():
        res = {}
        for signed in (False, True):
            tag = "median" if signed else "min"

            def upd():
                grid = np.zeros((depth, width))
                mod.update_many(grid, rows, signs, keys, deltas, signed)
                grids[name, signed] = grid

            res[f"update_{tag}"] = _best_of(upd)
            grid = grids[name, signed]
            res[f"estimate_{tag}"] = _best_of(lambda: mod.estimate_many(grid, rows, signs, keys, signed))
        results[name] = res
    if "cython" in results:
        for signed in (False, True):
            if not np.array_equal(grids["python", signed], grids["cython", signed]):
                raise AssertionError("backends disagree on sketch grids")
    if verbose:
        print(f"{n_keys} keys, depth {depth}, width {width}")
        names = list(results)
        print(f"{'operation':<16}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
        for op in results["python"]:
            line = f"{op:<16}" + "".join(f"{results[n][op]:>11.4f}s" for n in names)
            if "cython" in results:
                line += f"{results['python'][op] / results['cython'][op]:>11.1f}x"
            print(line)
    return results
