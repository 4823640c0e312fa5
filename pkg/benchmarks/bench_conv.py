"""Time the numpy (im2col + BLAS) and numba (@njit loops) convolution kernels.

Usage: python3 benchmarks/bench_conv.py [--channels 48] [--batch 8] [--length 4080]

Prints one row per (layer, pass) with the best-of-N wall time of each backend,
the speedup of numpy over numba and the max abs difference between them.
"""

import argparse
import time

import numpy as np

from fedrf import kernels
from fedrf.tensor import tap_offsets


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def layer_shapes(C):
    # (name, C_out, C_in, K, dilation)
    return [
        ("dilated d=1", 2 * C, C, 3, 1),
        ("dilated d=16", 2 * C, C, 3, 16),
        ("proj 1x1", 2 * C, C, 1, 1),
        ("lora A r=4", 4, C, 3, 4),
        ("lora B r=4", 2 * C, 4, 1, 1),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--channels", type=int, default=48)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--length", type=int, default=4080)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    B, T = args.batch, args.length
    print(f"C={args.channels} B={B} T={T}  (best of {args.repeat})")
    print(f"{'layer':<14} {'pass':<8} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8} {'max diff':>9}")
    for name, co, ci, K, d in layer_shapes(args.channels):
        offs = tap_offsets(K, d)
        x = rng.standard_normal((ci, B, T)).astype(np.float32)
        w = (rng.standard_normal((co, ci, K)) / np.sqrt(ci * K)).astype(np.float32)
        gy = rng.standard_normal((co, B, T)).astype(np.float32)
        passes = {
            "fwd": (kernels.conv_forward_np, kernels.conv_forward_nb, (x, w, offs)),
            "bwd_in": (kernels.conv_backward_input_np, kernels.conv_backward_input_nb, (gy, w, offs)),
            "bwd_w": (kernels.conv_backward_weight_np, kernels.conv_backward_weight_nb, (gy, x, offs)),
        }
        for pname, (f_np, f_nb, a) in passes.items():
            f_nb(*a)  # compile outside the timed region
            t_np = best_time(lambda: f_np(*a), args.repeat)
            t_nb = best_time(lambda: f_nb(*a), args.repeat)
            diff = float(np.max(np.abs(f_np(*a) - f_nb(*a))))
            print(f"{name:<14} {pname:<8} {1e3 * t_np:9.2f} {1e3 * t_nb:9.2f} {t_nb / t_np:7.1f}x {diff:9.1e}")


if __name__ == "__main__":
    main()
