"""Compare the numba and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--skip-training]

Kernel timings call both implementations side by side in one process. The
end-to-end timing runs one training cell per backend in a subprocess, since
the backend is fixed at import time by VFLDP_NO_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from vfldp import _kernels as K


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_rows(repeat):
    r = np.random.default_rng(0)
    grad = r.normal(size=(100, 196))
    z = r.normal(size=(100, 196))
    vec = r.normal(size=50_000)
    key = np.uint64(0x1234_5678_9ABC_DEF0)
    cases = [
        ("gaussian_fill n=1e6", lambda: K.gaussian_fill_numpy(int(key), 1_000_000),
         lambda: K.gaussian_fill_numba(key, 1_000_000), 3),
        ("gaussian_fill n=32", lambda: K.gaussian_fill_numpy(int(key), 32),
         lambda: K.gaussian_fill_numba(key, 32), 2000),
        ("relu_backward 100x196", lambda: K.relu_backward_numpy(grad, z),
         lambda: K.relu_backward_numba(grad, z), 2000),
        ("sq_norm n=5e4", lambda: K.sq_norm_numpy(vec), lambda: K.sq_norm_numba(vec), 2000),
    ]
    # warm the jit caches
    for _, _, jit_fn, _ in cases:
        jit_fn()
    rows = []
    for name, np_fn, jit_fn, number in cases:
        t_np = best_of(np_fn, repeat, number)
        t_jit = best_of(jit_fn, repeat, number)
        rows.append((name, t_np, t_jit))
    a = K.gaussian_fill_numpy(int(key), 10_001)
    b = K.gaussian_fill_numba(key, 10_001)
    drift = float(np.max(np.abs(a - b)))
    return rows, drift


TRAIN_SNIPPET = """
import time
from vfldp import runner
cfg = runner.ExperimentConfig(epsilon=1.0, epochs=20, batch_size=10, lr=0.05)
runner.run(cfg)  # warm-up (jit compile or cache load)
t = time.perf_counter()
runner.run(cfg)
print(time.perf_counter() - t)
"""


def training_time(no_numba):
    env = dict(os.environ, VFLDP_NO_NUMBA="1" if no_numba else "0")
    out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--skip-training", action="store_true")
    args = p.parse_args(argv)

    if not K.HAVE_NUMBA:
        print("numba is not importable; nothing to compare")
        return 1
    rows, drift = kernel_rows(args.repeat)
    print(f"{'kernel':<24}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, t_np, t_jit in rows:
        print(f"{name:<24}{t_np * 1e6:>10.1f}us{t_jit * 1e6:>10.1f}us{t_np / t_jit:>9.2f}x")
    print(f"max |numpy - numba| over 10001 gaussian draws: {drift:.3g}")

    if not args.skip_training:
        t_np = training_time(True)
        t_jit = training_time(False)
        print(f"{'adult dp cell, 20 epochs':<24}{t_np:>11.3f}s{t_jit:>11.3f}s{t_np / t_jit:>9.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
