"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N] [--batch B]

Shapes follow the 64x64 training configuration: the first conv layer of an
embedder over a batch of frames, and a full-resolution warp.
"""
import argparse
import time

import numpy as np

from daegan import kernels


def _best(fn, repeat):
    fn()  # warm-up (jit compile on the first call)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch, rng):
    x = rng.standard_normal((batch, 32, 66, 66)).astype(np.float32)
    ho = wo = 32
    cols = kernels.im2col_numpy(x, 3, 2, ho, wo)
    img = rng.standard_normal((batch, 3, 64, 64)).astype(np.float32)
    base = np.arange(64, dtype=np.float32)
    gx = np.broadcast_to(base[None, None, :], (batch, 64, 64)) + \
        rng.uniform(-3, 3, (batch, 64, 64)).astype(np.float32)
    gy = np.broadcast_to(base[None, :, None], (batch, 64, 64)) + \
        rng.uniform(-3, 3, (batch, 64, 64)).astype(np.float32)
    gout = rng.standard_normal(img.shape).astype(np.float32)
    return {
        "im2col": lambda v: getattr(kernels, f"im2col_{v}")(x, 3, 2, ho, wo),
        "col2im": lambda v: getattr(kernels, f"col2im_{v}")(cols, 66, 66, 2),
        "grid_fwd": lambda v: getattr(kernels, f"grid_sample_fwd_{v}")(img, gx, gy),
        "grid_bwd": lambda v: getattr(kernels, f"grid_sample_bwd_{v}")(img, gx, gy, gout),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=9)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':10s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, run in cases(args.batch, np.random.default_rng(0)).items():
        ref = _best(lambda: run("numpy"), args.repeat)
        fast = _best(lambda: run("numba"), args.repeat)
        print(f"{name:10s} {ref * 1e3:10.3f} {fast * 1e3:10.3f} {ref / fast:8.2f}x")


if __name__ == "__main__":
    main()
