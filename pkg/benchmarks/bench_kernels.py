"""Compare the compiled Jacobi SVD kernel with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from gatelab import _backend, _kernels_py


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = {
        "single 32x32": lambda k, a=rng.standard_normal((32, 32)): k.singular_values(a),
        "single 256x256": lambda k, a=rng.standard_normal((256, 256)): k.singular_values(a),
        "batch 2000x32x32": lambda k, a=rng.standard_normal((2000, 32, 32)): k.singular_values_batch(a),
        "grad matrix 256x1700": lambda k, a=rng.standard_normal((256, 1700)): k.singular_values(a),
    }
    backends = {"python": _kernels_py}
    if _backend.compiled_kernels is not None:
        backends["compiled"] = _backend.compiled_kernels
    else:
        print("compiled kernels not available; timing the numpy fallback only")
    print(f"{'case':<24}" + "".join(f"{name:>12}" for name in backends) + "     speedup")
    for label, fn in cases.items():
        t = {name: best_of(lambda: fn(k), args.repeat) for name, k in backends.items()}
        line = f"{label:<24}" + "".join(f"{t[n]:>11.3f}s" for n in backends)
        if "compiled" in t:
            line += f"{t['python'] / t['compiled']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
