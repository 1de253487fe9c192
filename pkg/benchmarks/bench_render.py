"""Compare the compiled splatting core against the numpy fallback.

    python3 benchmarks/bench_render.py [--gaussians 2000] [--size 64] [--repeat 5]

Times one forward render and one forward+backward pass per backend on the
same random scene and checks the two agree.
"""
import argparse
import time

import numpy as np

from egofield.splat.camera import look_at
from egofield.splat.gaussians import GaussianSet
from egofield.splat.render import Background, available_backends, render, render_backward


def scene(n, size, seed=0):
    rng = np.random.default_rng(seed)
    g = GaussianSet.create(
        rng.uniform(-1.5, 1.5, (n, 3)), rng.uniform(0.02, 0.15, (n, 3)), rng.uniform(0.1, 0.9, (n, 3)),
        rng.uniform(0.1, 0.9, n), features=rng.normal(size=(n, 16)), rotations=rng.normal(size=(n, 4)),
    )
    cam = look_at([0.2, 0.1, -5.0], [0.0, 0.0, 0.0], size, size, 45.0)
    return g, cam, Background.make((0.1, 0.1, 0.1), np.zeros(16)), rng


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--gaussians", type=int, default=2000)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    g, cam, bg, rng = scene(args.gaussians, args.size)
    up_rgb = rng.normal(size=(args.size, args.size, 3))
    up_feat = rng.normal(size=(args.size, args.size, 16))
    results = {}
    for backend in available_backends():
        fwd = best_of(lambda: render(g, cam, bg, backend), args.repeat)
        both = best_of(lambda: render_backward(render(g, cam, bg, backend), up_rgb, up_feat), args.repeat)
        results[backend] = (fwd, both, render(g, cam, bg, backend))
        print(f"{backend:9s} forward {fwd * 1e3:9.2f} ms   forward+backward {both * 1e3:9.2f} ms")
    if len(results) == 2:
        a, b = results["compiled"], results["python"]
        diff = max(np.abs(a[2].rgb - b[2].rgb).max(), np.abs(a[2].features - b[2].features).max())
        print(f"speed-up  forward {b[0] / a[0]:.1f}x   forward+backward {b[1] / a[1]:.1f}x   max |diff| {diff:.2e}")
    else:
        print("compiled core not built; only the fallback was timed")


if __name__ == "__main__":
    main()
