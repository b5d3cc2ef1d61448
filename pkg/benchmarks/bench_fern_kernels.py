"""Compare the compiled and numpy fern kernels on the network's layer shapes.

    python3 benchmarks/bench_fern_kernels.py [--repeats 5] [--batch 32]

Prints the best wall time of forward and backward per backend and layer, and
the speedup of the compiled kernels where they are available.
"""
import argparse
import time

import numpy as np

from fernnet import kernels
from fernnet.fern import WeightMode

# (label, rows per image, in_dim, c_out) for the blocks of the five-stage net at 64x64.
LAYERS = [("layer1 5x5/2", 32 * 32, 3 * 25, 64), ("layer2 3x3/2", 16 * 16, 64 * 9, 64),
          ("layer3 3x3/2", 8 * 8, 64 * 9, 64), ("layer5 1x1", 1, 64, 2)]


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench(backend, rows, dims, thr, lut, mode, grad, repeats):
    out, c, idx, w = backend.forward(rows, dims, thr, lut, mode)
    fwd = best_of(lambda: backend.forward(rows, dims, thr, lut, mode), repeats)
    bwd = best_of(lambda: backend.backward(c, idx, w, lut, grad, dims, mode, rows.shape[1]),
                  repeats)
    return fwd, bwd


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--ferns", type=int, default=24)
    parser.add_argument("--depth", type=int, default=3)
    parser.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    parser.add_argument("--weight-mode", default="literal_l2",
                        choices=[m.value for m in WeightMode])
    args = parser.parse_args()
    dtype = np.float32 if args.dtype == "f32" else np.float64
    mode = WeightMode.parse(args.weight_mode).code
    rng = np.random.default_rng(0)
    print(f"backends: {kernels.available()}  K={args.ferns} m={args.depth} batch={args.batch} "
          f"dtype={args.dtype}")
    print(f"{'layer':14s}{'rows':>8s}{'backend':>9s}{'forward ms':>12s}{'backward ms':>13s}"
          f"{'speedup':>9s}")
    for label, per_image, in_dim, c_out in LAYERS:
        r = per_image * args.batch
        rows = rng.standard_normal((r, in_dim)).astype(dtype)
        dims = rng.integers(0, in_dim, size=(args.ferns, args.depth)).astype(np.int64)
        thr = rng.standard_normal((args.ferns, args.depth)).astype(dtype)
        lut = rng.standard_normal((args.ferns << args.depth, c_out)).astype(dtype)
        grad = rng.standard_normal((r, c_out)).astype(dtype)
        timings = {name: bench(b, rows, dims, thr, lut, mode, grad, args.repeats)
                   for name, b in kernels.BACKENDS.items()}
        base = sum(timings["numpy"])
        for name, (fwd, bwd) in timings.items():
            speed = f"{base / (fwd + bwd):.1f}x" if name != "numpy" else "-"
            print(f"{label:14s}{r:8d}{name:>9s}{fwd * 1e3:12.2f}{bwd * 1e3:13.2f}{speed:>9s}")


if __name__ == "__main__":
    main()
