"""Compare the compiled dense-layer kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats 200]

Part 1 times forward + backward of a single layer at the shapes training
uses. Part 2 times full training iterations in subprocesses, one per
backend, since the backend is fixed at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from advflow import _kernels_py

try:
    from advflow import _kernels as compiled
except ImportError:
    compiled = None

ACTS = {"identity": _kernels_py.IDENTITY, "silu": _kernels_py.SILU, "tanh": _kernels_py.TANH}
SHAPES = [(256, 1, 48), (256, 57, 48), (256, 48, 48), (640, 48, 48), (256, 64, 64)]

ITERATION_SNIPPET = """
import time
from advflow import flows, kernels
from advflow.trainer import TrainConfig, Trainer
cfg = TrainConfig(steps=0, hidden_g=(48, 48, 48), hidden_d=(48, 48, 48), act="tanh", batch_size=256)
tr = Trainer(cfg, flows.three_mode_1d(), flows.standard_normal())
for _ in range(20):
    tr.iteration()
best = float("inf")
for _ in range(5):
    t0 = time.perf_counter()
    for _ in range({n}):
        tr.iteration()
    best = min(best, (time.perf_counter() - t0) / {n})
print(kernels.BACKEND, best)
"""


def layer_time(impl, n, k, m, act, repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(n, k))
    W = rng.normal(size=(k, m))
    b = rng.normal(size=m)
    g = rng.normal(size=(n, m))

    def run():
        pre, out = impl.dense_forward(x, W, b, act)
        impl.dense_backward(x, W, pre, out, g, act)

    return min(timeit.repeat(run, number=repeats, repeat=5)) / repeats


def iteration_time(pure, n):
    env = dict(os.environ)
    if pure:
        env["ADVFLOW_PURE_PYTHON"] = "1"
    else:
        env.pop("ADVFLOW_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", ITERATION_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--iterations", type=int, default=50)
    args = ap.parse_args()
    if compiled is None:
        sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    print(f"{'shape (n,k,m)':>16} {'act':>8} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for shape in SHAPES:
        for name, act in ACTS.items():
            tp = layer_time(_kernels_py, *shape, act, args.repeats)
            tc = layer_time(compiled, *shape, act, args.repeats)
            print(f"{str(shape):>16} {name:>8} {tp * 1e6:10.1f} {tc * 1e6:10.1f} {tp / tc:7.2f}x")

    print("\nfull training iteration (D step + G step, batch 256, width 48, tanh):")
    times = dict(iteration_time(pure, args.iterations) for pure in (True, False))
    for backend, t in times.items():
        print(f"  {backend:>7}: {t * 1e3:.2f} ms/iteration")
    print(f"  speedup: {times['python'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
