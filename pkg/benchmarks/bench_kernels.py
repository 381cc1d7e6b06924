"""Compare the compiled and numpy kernel backends (convolution and pooling) on the regressor's layer shapes.

    python benchmarks/bench_kernels.py [--batch 16] [--repeats 3]

Prints per-layer forward and backward timings for each available backend and
the speedup of the compiled one, plus the largest absolute disagreement.
"""

import argparse
import time

import numpy as np

from countshift import kernels

# (label, in channels, out channels, padded input extent, dilation)
LAYERS = (
    ("conv2 16->16 @128", 16, 16, 130, 1),
    ("conv3 16->32 @64", 16, 32, 66, 1),
    ("conv4 32->32 @32 d2", 32, 32, 36, 2),
    ("conv5 32->32 @32 d3", 32, 32, 38, 3),
)

# (label, channels, input extent)
POOLS = (
    ("pool 16 @128", 16, 128),
    ("pool 32 @64", 32, 64),
)


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t)
    return min(times), result


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = sorted(kernels.BACKENDS)
    print(f"backends: {', '.join(backends)}; batch {args.batch}; best of {args.repeats}")
    totals = {b: 0.0 for b in backends}
    for label, cin, cout, hp, dil in LAYERS:
        xp = rng.standard_normal((args.batch, cin, hp, hp))
        weight = rng.standard_normal((cout, cin, 3, 3)) * 0.1
        bias = rng.standard_normal(cout)
        ho = hp - 2 * dil
        gout = rng.standard_normal((args.batch, cout, ho, ho))
        results = {}
        line = f"{label:<22}"
        for name in backends:
            impl = kernels.BACKENDS[name]
            tf, out = best_of(lambda: impl.conv2d_forward(xp, weight, bias, 1, dil, ho, ho, True), args.repeats)
            tb, grads = best_of(lambda: impl.conv2d_backward(xp, weight, gout, 1, dil, True, out), args.repeats)
            results[name] = (out,) + tuple(grads)
            totals[name] += tf + tb
            line += f"  {name}: fwd {tf * 1e3:7.1f} ms  bwd {tb * 1e3:7.1f} ms"
        if len(results) == 2:
            a, b = results.values()
            diff = max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))
            line += f"  max|diff| {diff:.1e}"
        print(line)
    for label, channels, extent in POOLS:
        x = rng.standard_normal((args.batch, channels, extent, extent))
        g = rng.standard_normal((args.batch, channels, extent // 2, extent // 2))
        line = f"{label:<22}"
        outputs = []
        for name in backends:
            impl = kernels.BACKENDS[name]
            tf, out = best_of(lambda: impl.avgpool2_forward(x), args.repeats)
            tb, dx = best_of(lambda: impl.avgpool2_backward(g), args.repeats)
            outputs.append((out, dx))
            totals[name] += tf + tb
            line += f"  {name}: fwd {tf * 1e3:7.1f} ms  bwd {tb * 1e3:7.1f} ms"
        if len(outputs) == 2:
            same = all(a.tobytes() == b.tobytes() for a, b in zip(*outputs))
            line += "  bitwise equal" if same else "  DIFFER"
        print(line)
    summary = "  ".join(f"{name} {totals[name]:.3f} s" for name in backends)
    print(f"total fwd+bwd: {summary}")
    if "compiled" in totals and "python" in totals:
        print(f"compiled speedup: {totals['python'] / totals['compiled']:.2f}x")


if __name__ == "__main__":
    main()
