"""Benchmark the compiled compositing kernels against the numpy fallback.

Runs forward and backward passes over growing gaussian counts and image
sizes, checks both backends agree, and prints a timing table.

    python3 benchmarks/bench_rasterizer.py [--repeats N]
"""

import argparse
import time

import numpy as np

from flowsplat.geometry import Intrinsics, Pose
from flowsplat.rasterizer import available_backends, render, render_backward


def make_cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    means = np.column_stack([
        rng.uniform(-0.8, 0.8, n), rng.uniform(-0.8, 0.8, n),
        rng.uniform(1.2, 3.5, n),
    ])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(0.01, 0.08, (n, 3))
    opac = rng.uniform(0.2, 0.9, n)
    colors = rng.uniform(0, 1, (n, 3))
    return means, quats, scales, opac, colors


def bench_case(kern, cloud, K, dc, dd, repeats):
    fwd = []
    bwd = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = render(cloud, Pose.identity(), K, kernels=kern)
        fwd.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        render_backward(out, dc, dd, kernels=kern)
        bwd.append(time.perf_counter() - t0)
    return min(fwd), min(bwd), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    print(f"{'case':<26} " + "  ".join(
        f"{name + ' fwd':>12} {name + ' bwd':>12}" for name in backends
    ) + "   speedup(fwd/bwd)")

    rng = np.random.default_rng(1)
    for n, size in [(500, 64), (2000, 64), (2000, 128), (8000, 128), (20000, 128)]:
        K = Intrinsics(fx=size * 0.9, fy=size * 0.9, cx=size / 2, cy=size / 2,
                       width=size, height=size)
        cloud = make_cloud(n)
        dc = rng.normal(size=(size, size, 3))
        dd = rng.normal(size=(size, size))
        times = {}
        outs = {}
        for name, kern in backends.items():
            f, b, out = bench_case(kern, cloud, K, dc, dd, args.repeats)
            times[name] = (f, b)
            outs[name] = out
        if len(outs) == 2:
            a, b = outs["numpy"], outs["cython"]
            assert np.allclose(a.color, b.color, atol=1e-12), "backends disagree"
        row = f"{n:>6} splats @ {size}x{size:<6}"
        cells = "  ".join(
            f"{times[name][0] * 1e3:>10.2f}ms {times[name][1] * 1e3:>10.2f}ms"
            for name in backends
        )
        if len(times) == 2:
            su_f = times["numpy"][0] / times["cython"][0]
            su_b = times["numpy"][1] / times["cython"][1]
            cells += f"   {su_f:5.1f}x / {su_b:5.1f}x"
        print(row + " " + cells)


if __name__ == "__main__":
    main()
