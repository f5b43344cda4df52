"""Time every hot kernel under numba and under the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each kernel is called once first so JIT compilation stays out of the timings.
Also times one full-model training step with each backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from coswin.kernels import NUMBA_KERNELS, NUMPY_KERNELS, UNUSED_NUMBA


def workloads(rng):
    xp = rng.normal(size=(4, 32, 34, 34)).astype(np.float32)
    cols = NUMPY_KERNELS["im2col"](xp, 3, 1)
    segs = rng.uniform(0, 64, size=(12, 4))
    act = rng.normal(size=(4, 64, 32, 32)).astype(np.float32)
    buf = rng.integers(0, 256, size=4_000_000, dtype=np.uint8)
    return {
        "im2col": (xp, 3, 1),
        "col2im": (cols, 34, 34, 1),
        "segment_distance": (segs, 64, 64),
        "gelu_fwd": (act,),
        "gelu_bwd": (act, act),
        "crc64": (buf,),
    }


STEP_SCRIPT = """
import time, numpy as np
from coswin.roadnet import NetworkConfig, RoadNet, parameter_registry
from coswin.loss import LossConfig, RoadLoss, TaskWeights
from coswin.tensor import Tensor, backward
model = RoadNet(NetworkConfig(), seed=0)
reg = parameter_registry(model)
obj = RoadLoss(LossConfig(), TaskWeights(LossConfig()))
rng = np.random.default_rng(0)
x = Tensor(rng.random((4, 3, 64, 64)).astype(np.float32))
y = rng.random((4, 1, 64, 64)) < 0.1
times = []
for i in range({n}):
    t = time.perf_counter()
    loss, _, _ = obj(model(x), y, reg)
    backward(loss)
    times.append(time.perf_counter() - t)
print(min(times[1:]))
"""


def step_time(numba_on: bool, n: int = 4) -> float:
    env = dict(os.environ, COSWIN_NUMBA="1" if numba_on else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args(argv)
    work = workloads(np.random.default_rng(0))
    print(f"{'kernel':<18}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, call_args in work.items():
        fast, slow = UNUSED_NUMBA.get(name, NUMBA_KERNELS[name]), NUMPY_KERNELS[name]
        a, b = fast(*call_args), slow(*call_args)
        assert np.allclose(a, b, rtol=1e-5, atol=1e-5), name
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat)) * 1e3
        note = "  (numpy used under both backends)" if name in UNUSED_NUMBA else ""
        print(f"{name:<18}{t_fast:>12.3f}{t_slow:>12.3f}{t_slow / t_fast:>9.1f}x{note}")
    if not args.no_step:
        on, off = step_time(True), step_time(False)
        print(f"{'train step (b=4)':<18}{on * 1e3:>12.1f}{off * 1e3:>12.1f}{off / on:>9.1f}x")


if __name__ == "__main__":
    main()
