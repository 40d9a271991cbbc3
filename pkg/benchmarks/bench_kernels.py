"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--batch 20] [--repeat 5] [--step]

Each kernel runs on layer shapes taken from the 1x model at 32x32. Outputs of
the two backends are checked against each other before timing. ``--step``
also times one full training step per backend in a subprocess, since the
model picks its backend at import.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from dcrnet import kernels

CONV_CASES = [
    # name, cin, cout, kh, kw, dilation, groups
    ("head 5x5", 2, 2, 5, 5, (1, 1), 1),
    ("1x3 d3", 2, 2, 1, 3, (3, 3), 1),
    ("3x3 d2 2->8", 2, 8, 3, 3, (2, 2), 1),
    ("3x1 depthwise", 8, 8, 3, 1, (3, 3), 8),
    ("3x3 8->2", 8, 2, 3, 3, (1, 1), 1),
    ("1x1 fuse", 4, 2, 1, 1, (1, 1), 1),
]


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_kernels(batch, repeat, hw=32):
    rng = np.random.default_rng(0)
    cy = kernels.get_backend("cython")
    py = kernels.get_backend("python")
    rows = []

    def add(name, make):
        out = {}
        for label, impl in (("cython", cy), ("python", py)):
            fn = make(impl)
            out[label] = (fn(), _best(fn, repeat))
        a, b = out["cython"][0], out["python"][0]
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        err = max(float(np.max(np.abs(np.asarray(x, np.float64) - np.asarray(y, np.float64))))
                  / (float(np.max(np.abs(np.asarray(y, np.float64)))) or 1.0)
                  for x, y in zip(a, b) if x is not None)
        rows.append((name, out["cython"][1], out["python"][1], err))

    for name, cin, cout, kh, kw, dil, groups in CONV_CASES:
        x = rng.standard_normal((batch, cin, hw, hw)).astype(np.float32)
        w = rng.standard_normal((cout, cin // groups, kh, kw)).astype(np.float32)
        pad = ((kh - 1) * dil[0] // 2, (kw - 1) * dil[1] // 2)
        gy = rng.standard_normal((batch, cout, hw, hw)).astype(np.float32)
        add(f"conv fwd {name}",
            lambda impl: lambda: kernels.conv2d_forward(x, w, pad, dil, groups, impl=impl))
        add(f"conv bwd {name}",
            lambda impl: lambda: kernels.conv2d_backward(x, w, gy, pad, dil, groups, impl=impl))

    c = 8
    x = rng.standard_normal((batch, c, hw, hw)).astype(np.float32)
    gy = rng.standard_normal(x.shape).astype(np.float32)
    gamma = rng.uniform(0.5, 1.5, c).astype(np.float32)
    beta = rng.standard_normal(c).astype(np.float32)
    _, mean, _, invstd = kernels.bn_prelu_forward_train(x, gamma, beta, 0.25, 1e-5, impl=py)
    add("bn+prelu fwd",
        lambda impl: lambda: kernels.bn_prelu_forward_train(x, gamma, beta, 0.25, 1e-5, impl=impl))
    add("bn+prelu bwd",
        lambda impl: lambda: kernels.bn_prelu_backward(gy, x, gamma, beta, 0.25, mean, invstd,
                                                       impl=impl))
    add("prelu fwd", lambda impl: lambda: kernels.prelu_forward(x, 0.25, impl=impl))
    return rows


STEP_SNIPPET = """
import time, numpy as np
from dcrnet import kernels
from dcrnet.autodiff import Tape, Tensor, mse_loss
from dcrnet.model import build, DcrNetConfig
m = build(DcrNetConfig(), 0)
x = Tensor(np.random.default_rng(0).uniform(0, 1, ({batch}, 2, 32, 32)).astype(np.float32))
def step():
    m.zero_grad()
    with Tape() as t:
        loss = mse_loss(m(x), x)
    t.backward(loss)
step()
best = min((lambda t0: (step(), time.perf_counter() - t0)[1])(time.perf_counter())
           for _ in range({repeat}))
print(kernels.BACKEND, best)
"""


def bench_step(batch, repeat):
    out = {}
    for backend in kernels.available_backends():
        env = dict(os.environ, DCRNET_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(batch=batch, repeat=repeat)],
                             env=env, capture_output=True, text=True, check=True)
        name, seconds = res.stdout.split()
        out[name] = float(seconds)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=20)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--step", action="store_true", help="also time a full training step")
    args = p.parse_args(argv)
    if "cython" not in kernels.available_backends():
        print("compiled backend not built; nothing to compare", file=sys.stderr)
        return 1
    print(f"batch {args.batch}, best of {args.repeat}, float32")
    print(f"{'kernel':28s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s} {'rel err':>9s}")
    for name, tc, tp, err in bench_kernels(args.batch, args.repeat):
        print(f"{name:28s} {tc * 1e3:10.3f} {tp * 1e3:10.3f} {tp / tc:8.1f} {err:9.1e}")
    if args.step:
        steps = bench_step(args.batch, args.repeat)
        c, py = steps["cython"], steps["python"]
        print(f"{'training step':28s} {c * 1e3:10.3f} {py * 1e3:10.3f} {py / c:8.1f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
