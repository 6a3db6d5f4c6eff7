"""Time the hot kernels under each available backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 64]
"""

import argparse
import time

import numpy as np

from sfdd import distill, nn
from sfdd.tensorcore import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch):
    gen = np.random.default_rng(0)
    x = gen.normal(size=(batch, 32, 28, 28)).astype(np.float32)
    x1 = gen.uniform(size=(batch, 1, 28, 28)).astype(np.float32)
    w = gen.normal(size=(32, 32, 3, 3)).astype(np.float32)
    g = gen.normal(size=x.shape).astype(np.float32)
    y, inv = kernels.instance_norm_fwd(x, 1e-5)
    pooled = kernels.avgpool2x2(x)
    spec = nn.ModelSpec()
    params = nn.build_model(spec, 0)
    block = gen.uniform(size=(10, 1, 28, 28)).astype(np.float32)
    return {
        "im2col3x3": lambda: kernels.im2col3x3(x),
        "conv2d": lambda: kernels.conv2d(x, w),
        "avgpool2x2": lambda: kernels.avgpool2x2(x),
        "avgpool2x2_adjoint": lambda: kernels.avgpool2x2_adjoint(pooled, 28, 28),
        "instance_norm_fwd": lambda: kernels.instance_norm_fwd(x, 1e-5),
        "instance_norm_bwd": lambda: kernels.instance_norm_bwd(g, y, inv),
        "class_pixel_grad": lambda: distill.class_pixel_grad(params, spec, block, x1, None, 0),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    results = {}
    prev = kernels.use_backend(backends[0])
    try:
        for b in backends:
            kernels.use_backend(b)
            for name, fn in cases(args.batch).items():
                fn()  # warm up
                results[(name, b)] = best_of(fn, args.repeat)
    finally:
        kernels.use_backend(prev)

    names = list(cases(1))
    print(f"batch {args.batch}, best of {args.repeat} (ms)")
    print(f"{'kernel':22s}" + "".join(f"{b:>10s}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name in names:
        row = [results[(name, b)] * 1e3 for b in backends]
        line = f"{name:22s}" + "".join(f"{v:10.2f}" for v in row)
        if len(backends) > 1:
            line += f"{row[backends.index('numpy')] / row[backends.index('cython')]:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
