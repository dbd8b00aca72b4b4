#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Covers the two hot paths: fused attention (the per-frame sizes the denoiser
actually issues during cached rollout and training) and ray casting at
dataset-rendering sizes. Asserts numeric agreement, then reports timings.

Run:  python3 benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from arnvs import kernels
from arnvs.geometry import look_at
from arnvs.worldgen import _ray_grid, default_intrinsics, sample_scene


def timeit(fn, repeats):
    fn()  # warmup
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_attention(backends, repeats):
    print("\nattention_forward (B=batch*heads, Nq query tokens, Nk key tokens, D head dim)")
    print(f"{'case':<38}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    cases = [
        ("decode: 1 frame vs 4-window", (4, 64, 320, 32), np.float32),
        ("decode: 1 frame vs 32 frames", (4, 64, 2112, 32), np.float32),
        ("train: 8-frame causal tail", (16, 64, 512, 32), np.float32),
        ("train spatial: folded frames", (128, 64, 64, 32), np.float32),
        ("float64 eval path", (4, 64, 512, 32), np.float64),
    ]
    for label, (b, nq, nk, d), dtype in cases:
        rng = np.random.default_rng(0)
        q = rng.normal(size=(b, nq, d)).astype(dtype)
        k = rng.normal(size=(b, nk, d)).astype(dtype)
        v = rng.normal(size=(b, nk, d)).astype(dtype)
        outs, times = {}, {}
        for name, impl in backends.items():
            outs[name] = impl.attention_forward(q, k, v, 0.176777)[0]
            times[name] = timeit(lambda impl=impl: impl.attention_forward(q, k, v, 0.176777), repeats)
        if len(outs) == 2:
            np.testing.assert_allclose(outs["compiled"], outs["pure"], rtol=2e-5, atol=2e-5)
        row = f"{label:<38}" + "".join(f"{times[n] * 1e6:>12.1f}us" for n in backends)
        if len(times) == 2:
            row += f"{times['pure'] / times['compiled']:>9.2f}x"
        print(row)


def bench_trace_rays(backends, repeats):
    print("\ntrace_rays (rays = pixels)")
    print(f"{'case':<38}" + "".join(f"{name:>14}" for name in backends) + f"{'speedup':>10}")
    for label, size in [("dataset render 16x16", 16), ("eval render 32x32", 32), ("preview 128x128", 128)]:
        scene = sample_scene(7)
        pose = look_at(np.array([1.2, 0.3, -1.0]), np.zeros(3))
        intr = default_intrinsics(size)
        dirs = np.ascontiguousarray(_ray_grid(pose, intr))
        args = (
            np.ascontiguousarray(pose.translation),
            dirs,
            np.ascontiguousarray(scene.sphere_centers),
            np.ascontiguousarray(scene.sphere_radii),
            np.ascontiguousarray(scene.sphere_colors),
            np.ascontiguousarray(scene.room_min),
            np.ascontiguousarray(scene.room_max),
            np.ascontiguousarray(scene.face_colors),
            np.ascontiguousarray(scene.light_dir),
            0.2,
        )
        outs, times = {}, {}
        for name, impl in backends.items():
            outs[name] = impl.trace_rays(*args)
            times[name] = timeit(lambda impl=impl: impl.trace_rays(*args), repeats)
        if len(outs) == 2:
            np.testing.assert_allclose(outs["compiled"][0], outs["pure"][0], rtol=1e-12, atol=1e-12)
        row = f"{label:<38}" + "".join(f"{times[n] * 1e6:>12.1f}us" for n in backends)
        if len(times) == 2:
            row += f"{times['pure'] / times['compiled']:>9.2f}x"
        print(row)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    backends = kernels.backends()
    print(f"active backend: {kernels.BACKEND}; available: {sorted(backends)}")
    if "compiled" not in backends:
        print("compiled extension missing; timing the fallback only")
    bench_attention(backends, args.repeats)
    bench_trace_rays(backends, args.repeats)


if __name__ == "__main__":
    main()
