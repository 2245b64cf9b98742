"""Time the compiled attention kernel against the numpy fallback.

    python benchmarks/bench_kernels.py [--batch 1000] [--repeat 50]

Shapes match one training step at the default problem size (d=5, n=20).
"""
import argparse
import time

import numpy as np

from memformer import kernels


def bench(backend, Z, P, Q, G, n_ctx, repeat):
    best_f = best_b = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out, S, T = backend.attention_forward(Z, P, Q, n_ctx)
        best_f = min(best_f, time.perf_counter() - t)
        t = time.perf_counter()
        backend.attention_backward(Z, P, Q, S, T, G, n_ctx)
        best_b = min(best_b, time.perf_counter() - t)
    return best_f, best_b


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=1000)
    ap.add_argument("--d", type=int, default=5)
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    D, N = args.d + 1, args.n + 1
    Z = rng.standard_normal((args.batch, D, N))
    P, Q = rng.standard_normal((2, D, D))
    G = rng.standard_normal((args.batch, D, N))

    backends = [("python", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.append(("cython", kernels.compiled_backend))
    else:
        print("compiled extension not built; timing the numpy fallback only")

    times = {}
    for name, be in backends:
        f, b = bench(be, Z, P, Q, G, args.n, args.repeat)
        times[name] = f + b
        print(f"{name:7s} forward {f * 1e3:8.3f} ms  backward {b * 1e3:8.3f} ms  total {(f + b) * 1e3:8.3f} ms")
    if len(times) == 2:
        print(f"speedup {times['python'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
