"""Compare the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at import
time by ``IMPLREG_DISABLE_NUMBA``.  Usage::

    python benchmarks/bench_backends.py [--size 128] [--channels 8] [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, sys, time
import numpy as np
from implreg import backend_name, kernels
from implreg.implicit import block_hessian
from implreg.solver import SolverConfig, register_multiscale

size, channels, repeat = map(int, sys.argv[1:4])
rng = np.random.default_rng(0)
img = rng.normal(size=(size, size, channels))
coords = rng.uniform(-1, size, size=(size * size, 2))
up = rng.normal(size=(size * size, channels))
u = rng.normal(size=(size * size, 2))
disp = rng.uniform(-2, 2, size=(size, size, 2))

cases = {
    "sample": lambda: kernels.sample(img, coords),
    "spatial_grad": lambda: kernels.spatial_grad(img, coords),
    "sample_backward": lambda: kernels.sample_backward(img.shape, coords, up),
    "sample_grad2": lambda: kernels.sample_grad2(img, coords, up, u),
    "block_hessian": lambda: block_hessian(disp, img, img),
    "solve_50_iters": lambda: register_multiscale([img], [img[::-1]], SolverConfig(scales=(1,), iters=(50,), rel_tol=1e-300)),
}
out = {"backend": backend_name()}
for name, fn in cases.items():
    fn()  # compile / warm caches
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    out[name] = best
print(json.dumps(out))
"""


def run(disable, size, channels, repeat):
    env = dict(os.environ, IMPLREG_DISABLE_NUMBA="1" if disable else "0")
    proc = subprocess.run(
        [sys.executable, "-c", WORKER, str(size), str(channels), str(repeat)],
        env=env, check=True, capture_output=True, text=True,
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    fast = run(False, args.size, args.channels, args.repeat)
    slow = run(True, args.size, args.channels, args.repeat)
    print(f"{'kernel':<18}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for key in fast:
        if key == "backend":
            continue
        print(f"{key:<18}{fast[key] * 1e3:>10.2f}ms{slow[key] * 1e3:>10.2f}ms{slow[key] / fast[key]:>9.1f}x")


if __name__ == "__main__":
    main()
