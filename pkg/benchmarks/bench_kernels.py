"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--batch 128] [--repeat 5] [--e2e]

Kernel timings call both implementations in-process. ``--e2e`` also times one
training epoch of SmallConvNet in two subprocesses, one per value of the
``AUGSHIELD_NUMBA`` flag, so the switch is exercised the way users set it.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from augshield import kernels
from augshield._accel import HAVE_NUMBA

E2E = """
import time, numpy as np
from augshield import datagen, model, trainer, kernels
ds = datagen.gen_shapeset(7, 50, (32, 32, 3))
m = model.small_convnet((32, 32, 3), 10).init_params(np.random.default_rng(0))
cfg = trainer.TrainConfig(epochs=1, batch_size=64)
trainer.train(m, ds, cfg, np.random.default_rng(0))  # warm-up / compile
t = time.perf_counter()
trainer.train(m, ds, cfg, np.random.default_rng(1))
print(kernels.USE_NUMBA, time.perf_counter() - t)
"""


def best(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=128)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--cin", type=int, default=3)
    ap.add_argument("--cout", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--e2e", action="store_true")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.random((args.batch, args.size, args.size, args.cin))
    w = rng.normal(size=(3, 3, args.cin, args.cout))
    b = rng.normal(size=args.cout)
    g = rng.normal(size=(args.batch, args.size, args.size, args.cout))
    pooled, idx = kernels.maxpool2_forward_np(g)

    cases = {
        "conv2d forward": (
            lambda: kernels.conv2d_forward_np(x, w, b),
            lambda: kernels.conv2d_forward_nb(x, w, b),
        ),
        "conv2d backward": (
            lambda: kernels.conv2d_backward_np(x, w, g),
            lambda: kernels.conv2d_backward_nb(x, w, g),
        ),
        "maxpool2 forward": (
            lambda: kernels.maxpool2_forward_np(g),
            lambda: kernels.maxpool2_forward_nb(g),
        ),
        "maxpool2 backward": (
            lambda: kernels.maxpool2_backward_np(idx, pooled, g.shape),
            lambda: kernels.maxpool2_backward_nb(idx, pooled, g.shape),
        ),
    }
    print(f"batch={args.batch} size={args.size} cin={args.cin} cout={args.cout} numba={HAVE_NUMBA}")
    print(f"{'kernel':<20}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for name, (f_np, f_nb) in cases.items():
        t_np = best(f_np, args.repeat)
        if HAVE_NUMBA:
            t_nb = best(f_nb, args.repeat)
            print(f"{name:<20}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>10.2f}")
        else:
            print(f"{name:<20}{t_np:>12.4f}{'n/a':>12}{'':>10}")

    if args.e2e:
        for flag in ("0", "1"):
            env = dict(os.environ, AUGSHIELD_NUMBA=flag)
            out = subprocess.run(
                [sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True
            )
            used, secs = out.stdout.split()
            print(f"one SmallConvNet epoch (500 images), AUGSHIELD_NUMBA={flag}: {float(secs):.2f} s (numba used: {used})")


if __name__ == "__main__":
    main()
