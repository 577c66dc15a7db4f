"""Time the compiled depthwise-conv kernels against the NumPy fallback.

    python3 benchmarks/compare_backends.py [--iters N]

Both backends must produce bit-identical outputs; the script checks that
before timing.
"""

import argparse
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from stmx import kernels

SHAPES = [(8, 7, 7, 256), (8, 14, 14, 512), (8, 16, 16, 1024)]


def median_ms(fn, iters):
    fn()
    times = []
    for _ in range(iters):
        start = time.perf_counter_ns()
        fn()
        times.append((time.perf_counter_ns() - start) / 1e6)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=20)
    args = ap.parse_args()

    names = kernels.available_backends()
    if "cython" not in names:
        print("compiled kernels not built; only the NumPy fallback is available")
    backends = {n: kernels.load_backend(n) for n in names}
    rng = np.random.default_rng(0)
    print(f"{'kernel':10s} {'shape':16s} " + " ".join(f"{n:>10s}" for n in names) + "   speedup")
    with threadpool_limits(limits=1):
        for t, h, w, c in SHAPES:
            xpad = rng.standard_normal((t, h + 2, w + 2, c)).astype(np.float32)
            k2 = rng.standard_normal((c, 3, 3)).astype(np.float32)
            lines = rng.standard_normal((h * w, t + 2, c)).astype(np.float32)
            k1 = rng.standard_normal((c, 3)).astype(np.float32)
            bias = rng.standard_normal(c).astype(np.float32)
            cases = {
                "dwconv2d": lambda b: b.dwconv2d_valid(xpad, k2, bias),
                "dwconv1d": lambda b: b.dwconv1d_valid(lines, k1, bias),
            }
            for label, call in cases.items():
                outs = [call(b) for b in backends.values()]
                assert all(np.array_equal(outs[0], o) for o in outs[1:]), f"{label}: backends disagree"
                ms = [median_ms(lambda b=b: call(b), args.iters) for b in backends.values()]
                speedup = f"{ms[-1] / ms[0]:8.2f}x" if len(ms) > 1 else ""
                print(f"{label:10s} {f'{t}x{h}x{w}x{c}':16s} " + " ".join(f"{m:10.3f}" for m in ms) + f"   {speedup}")


if __name__ == "__main__":
    main()
