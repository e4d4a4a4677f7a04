"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Kernel timings use shapes from a C_p batch of 64. The end-to-end rows time
one C_p training step and one input-gradient pass in separate processes,
since the backend is chosen when ``sptlab`` is first imported.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sptlab import _kernels_py as py

try:
    from sptlab import _kernels as cy
except ImportError:
    cy = None

STEP_SNIPPET = """
import time, numpy as np
from sptlab import kernels, autodiff as ad
from sptlab.models import build, train_step
from sptlab.optim import Adam
from sptlab.attacks import input_gradient
from sptlab.data import one_hot
rng = np.random.default_rng(0)
x = rng.uniform(0, 1, (64, 1, 28, 28)); y = one_hot(rng.integers(0, 10, 64))
m = build("C_p").copy(); opt = Adam(m.params)
train_step(m, opt, x, y)
t = time.perf_counter()
for _ in range({n}): train_step(m, opt, x, y)
step = (time.perf_counter() - t) / {n}
t = time.perf_counter()
for _ in range({n}): input_gradient(m, x, y)
grad = (time.perf_counter() - t) / {n}
print(kernels.BACKEND, step, grad)
"""


def kernel_cases(rng):
    x1 = np.pad(rng.standard_normal((64, 1, 28, 28)), ((0, 0), (0, 0), (2, 2), (2, 2)))
    x2 = np.pad(rng.standard_normal((64, 32, 14, 14)), ((0, 0), (0, 0), (2, 2), (2, 2)))
    cols2 = py.im2col(x2, 5, 5, 1)
    pool_in = rng.standard_normal((64, 32, 28, 28))
    _, idx = py.maxpool_forward(pool_in, 2, 2)
    dout = rng.standard_normal((64, 32, 14, 14))
    return {
        "im2col conv1 (64x1x32x32, k5)": lambda k: k.im2col(x1, 5, 5, 1),
        "im2col conv2 (64x32x18x18, k5)": lambda k: k.im2col(x2, 5, 5, 1),
        "col2im conv2": lambda k: k.col2im(cols2, 64, 32, 18, 18, 5, 5, 1),
        "maxpool fwd (64x32x28x28)": lambda k: k.maxpool_forward(pool_in, 2, 2),
        "maxpool bwd": lambda k: k.maxpool_backward(dout, idx, 28, 28),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def end_to_end(pure: bool, n: int) -> tuple[str, float, float]:
    env = dict(os.environ, SPTLAB_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=n)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1]), float(out[2])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=5, help="training steps per end-to-end timing")
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    if cy is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, call in kernel_cases(rng).items():
        tp = best_of(lambda: call(py), args.repeat)
        tc = best_of(lambda: call(cy), args.repeat)
        rows.append({"case": name, "python_s": tp, "cython_s": tc})
        print(f"{name:34s} {1e3 * tp:10.2f} {1e3 * tc:10.2f} {tp / tc:7.2f}x")

    results = {}
    for pure in (True, False):
        backend, step, grad = end_to_end(pure, args.steps)
        results[backend] = (step, grad)
    for i, label in enumerate(("C_p train step (batch 64)", "C_p input gradient (batch 64)")):
        tp, tc = results["python"][i], results["cython"][i]
        rows.append({"case": label, "python_s": tp, "cython_s": tc})
        print(f"{label:34s} {1e3 * tp:10.1f} {1e3 * tc:10.1f} {tp / tc:7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
