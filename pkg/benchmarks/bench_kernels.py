"""Benchmark the compiled sketch kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [n_keys]
"""

import sys

from hotcount.bench import run_kernel_benchmark

if __name__ == "__main__":
    run_kernel_benchmark(int(sys.argv[1]) if len(sys.argv) > 1 else 200_000)
