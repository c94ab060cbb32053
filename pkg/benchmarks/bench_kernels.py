#!/usr/bin/env python3
"""Benchmark the compiled convolution core against the numpy backend.

Covers the shapes that dominate a training step (forward, weight
gradient, input gradient at both strides) plus one full composite
training step per backend.

Usage: python benchmarks/bench_kernels.py [--repeat 30]
"""
import argparse
import time

import numpy as np

from segaware import kernels
from segaware.data import generate_shapes_corpus, sample_patches
from segaware.model import build_model
from segaware.training import TrainConfig, loss_and_grads


def best_of(fn, repeat, inner=10):
    best = float("inf")
    fn()
    for _ in range(repeat):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def bench_conv(repeat):
    cases = [
        ("fwd 32->32 s1 (denoiser body)", "fwd", (16, 48, 48, 32, 32, 1)),
        ("fwd 3->32 s1 (denoiser in)", "fwd", (16, 48, 48, 3, 32, 1)),
        ("fwd 32->3 s1 (denoiser out)", "fwd", (16, 48, 48, 32, 3, 1)),
        ("fwd 3->64 s2 (embed 1)", "fwd", (16, 48, 48, 3, 64, 2)),
        ("fwd 64->64 s2 (embed 2)", "fwd", (16, 24, 24, 64, 64, 2)),
        ("gw 32->32 s1", "gw", (16, 48, 48, 32, 32, 1)),
        ("gi 32->32 s1", "gi", (16, 48, 48, 32, 32, 1)),
        ("gi 64->64 s2", "gi", (16, 24, 24, 64, 64, 2)),
    ]
    rng = np.random.default_rng(0)
    print(f"{'case':34s} " + "".join(f"{b:>12s}" for b in kernels.available_backends())
          + "   speedup")
    for label, kind, (b, h, w, c, o, stride) in cases:
        x = rng.standard_normal((b, h, w, c)).astype(np.float32)
        wt = (rng.standard_normal((3, 3, c, o)) * 0.1).astype(np.float32)
        bias = np.zeros(o, np.float32)
        ho, wo = kernels.out_hw(h, w, stride)
        dy = rng.standard_normal((b, ho, wo, o)).astype(np.float32)
        times = {}
        for backend in kernels.available_backends():
            if kind == "fwd":
                fn = lambda: kernels.conv2d_forward(x, wt, bias, stride,
                                                    backend=backend)
                flops = 2 * b * ho * wo * 9 * c * o
            elif kind == "gw":
                fn = lambda: kernels.conv2d_backward_weights(x, dy, stride,
                                                             backend=backend)
                flops = 2 * b * ho * wo * 9 * c * o
            else:
                fn = lambda: kernels.conv2d_backward_input(dy, wt, stride,
                                                           in_hw=(h, w),
                                                           backend=backend)
                flops = 2 * b * h * w * 9 * c * o
            times[backend] = best_of(fn, repeat)
        row = f"{label:34s} "
        for backend in kernels.available_backends():
            t = times[backend]
            row += f"{t * 1e3:7.2f} ms ({flops / t / 1e9:4.0f}G)"[:24].rjust(12)
        if len(times) == 2:
            row += f"   {times['numpy'] / times['cython']:.2f}x"
        print(row)


def bench_train_step(repeat):
    corpus = generate_shapes_corpus(8, (64, 64), 6, seed=0)
    cfg = TrainConfig(mode="usaid", k_classes=6, sigma_range=(25.0, 25.0))
    state = build_model(cfg)
    pairs = sample_patches(corpus, cfg.patch, cfg.batch_size, seed=1)
    clean = np.stack([p for p, _ in pairs]).astype(np.float32)
    rng = np.random.default_rng(2)
    noisy = clean + rng.standard_normal(clean.shape, dtype=np.float32) * (25 / 255)
    batch = {"clean": clean, "noisy": noisy}
    print("\nfull composite training step (loss + all gradients):")
    import segaware.kernels as K
    from segaware.buffers import ArrayPool

    for backend in kernels.available_backends():
        saved = K._ACTIVE
        K._ACTIVE = backend
        pool = ArrayPool()
        try:
            t = best_of(lambda: loss_and_grads(state, batch, cfg, pool=pool),
                        max(3, repeat // 5), inner=3)
        finally:
            K._ACTIVE = saved
        print(f"  {backend:8s} {t * 1e3:8.1f} ms/step  ({1 / t:5.2f} steps/s)")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"backends available: {kernels.available_backends()} "
          f"(active: {kernels.backend_name()})")
    bench_conv(args.repeat)
    bench_train_step(args.repeat)
