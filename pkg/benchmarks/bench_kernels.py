"""Compiled vs pure-numpy kernel timings, plus one full training step per backend.

Run: ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each row reports
the median wall time over ``repeat`` calls and the speedup of the compiled
backend. Outputs are also checked for bitwise equality.
"""

import argparse
import statistics
import time

import numpy as np

from mimofan import kernels
from mimofan.metrics import dps_loss
from mimofan.network import NetworkConfig, build
from mimofan.pyramid import label_pyramid
from mimofan.tensor import Tape, Tensor


def _median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(rng):
    x = rng.standard_normal((4, 16, 64, 64)).astype(np.float32)
    cols = kernels.python_backend.im2col(x, 3, 3, 1, 1)
    small = rng.standard_normal((4, 32, 32, 32)).astype(np.float32)
    up_g = rng.standard_normal((4, 32, 64, 64)).astype(np.float32)
    taps = rng.standard_normal((4, 9, 8, 66, 66)).astype(np.float32)
    tap_g = rng.standard_normal((4, 8, 64, 64)).astype(np.float32)
    return {
        "im2col 4x16x64x64 k3": lambda b: b.im2col(x, 3, 3, 1, 1),
        "col2im 4x16x64x64 k3": lambda b: b.col2im(cols, x.shape, 3, 3, 1, 1),
        "upsample2 4x32x32x32": lambda b: b.upsample2(small),
        "upsample2_backward 4x32x64x64": lambda b: b.upsample2_backward(up_g),
        "tap_gather 4x9x8x66x66": lambda b: b.tap_gather(taps, 3, 3, 64, 64),
        "tap_scatter 4x8x64x64": lambda b: b.tap_scatter(tap_g, 3, 3, 66, 66),
    }


def train_step(filters=2, size=64, batch=4, seed=0):
    rng = np.random.default_rng(seed)
    model = build(NetworkConfig(filters=filters), seed)
    x = Tensor(rng.random((batch, 1, size, size)).astype(np.float32))
    labels = label_pyramid(Tensor((rng.random((batch, 1, size, size)) > 0.5).astype(np.float32)), 5)

    def step():
        with Tape() as tape:
            loss = dps_loss(model.forward(x), labels)
        model.zero_grad()
        tape.backward(loss)

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--step-repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels not built; run `pip install -e . --no-build-isolation` first")

    rng = np.random.default_rng(0)
    py, cy = kernels.python_backend, kernels.compiled_backend
    print(f"{'kernel':<32} {'python ms':>10} {'cython ms':>10} {'speedup':>8}  bitwise")
    for name, call in kernel_cases(rng).items():
        same = np.array_equal(call(py), call(cy))
        tp = _median_time(lambda: call(py), args.repeat)
        tc = _median_time(lambda: call(cy), args.repeat)
        print(f"{name:<32} {1e3 * tp:10.3f} {1e3 * tc:10.3f} {tp / tc:8.2f}  {'yes' if same else 'NO'}")

    step = train_step()
    res = {}
    for backend in ("python", "cython"):
        with kernels.use_backend(backend):
            res[backend] = _median_time(step, args.step_repeat)
    print(
        f"{'train step F=2 64x64 batch 4':<32} {1e3 * res['python']:10.1f} {1e3 * res['cython']:10.1f} "
        f"{res['python'] / res['cython']:8.2f}"
    )


if __name__ == "__main__":
    main()
