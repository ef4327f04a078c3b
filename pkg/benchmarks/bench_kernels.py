#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times the four hot kernels on training-representative shapes, then a full
forward+backward training step with each backend patched in. Run with:

    python benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from semask import kernels
from semask.kernels import available_backends, get_backend


def timeit(fn, repeats=5, warmup=1):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(backend_name: str, rng) -> list[tuple[str, float]]:
    be = get_backend(backend_name)
    rows = []

    shapes = [
        ("conv3x3 16x16x32", (4, 16, 16, 32), (3, 3, 32, 32)),
        ("conv3x3 64x64x32", (4, 64, 64, 32), (3, 3, 32, 32)),
        ("conv1x1 64x64x128", (4, 64, 64, 128), (1, 1, 128, 64)),
    ]
    for label, xs, ks in shapes:
        x = rng.standard_normal(xs).astype(np.float32)
        k = rng.standard_normal(ks).astype(np.float32)
        pad = (ks[0] - 1) // 2
        rows.append((f"{label} fwd", timeit(
            lambda: be.conv2d_forward(x, k, pad, pad, xs[1], xs[2]))))
        dout = rng.standard_normal(xs[:3] + (ks[3],)).astype(np.float32)
        rows.append((f"{label} bwd_x", timeit(
            lambda: be.conv2d_backward_input(dout, k, pad, pad, xs[1], xs[2]))))
        rows.append((f"{label} bwd_k", timeit(
            lambda: be.conv2d_backward_kernel(x, dout, pad, pad, ks[0], ks[1]))))

    for label, xs, out_hw in [
        ("bilinear up 16->64 x32", (4, 16, 16, 32), (64, 64)),
        ("bilinear up 64->256 x4", (4, 64, 64, 4), (256, 256)),
    ]:
        x = rng.standard_normal(xs).astype(np.float32)
        rows.append((f"{label} fwd", timeit(
            lambda: be.bilinear_forward(x, *out_hw))))
        dout = rng.standard_normal((xs[0],) + out_hw + (xs[3],)).astype(np.float32)
        rows.append((f"{label} bwd", timeit(
            lambda: be.bilinear_backward(dout, xs[1], xs[2]))))
    return rows


def bench_train_step(backend_name: str) -> float:
    """One forward+backward+update on the toy model, kernels patched."""
    import semask.tensor  # noqa: F401  (binds the kernels module first)
    from semask.config import RunConfig
    from semask.data import synth_shapes
    from semask.model import SegModel
    from semask.training import train_loop

    be = get_backend(backend_name)
    saved = {name: getattr(kernels, name) for name in (
        "conv2d_forward", "conv2d_backward_input", "conv2d_backward_kernel",
        "bilinear_forward", "bilinear_backward")}
    try:
        for name in saved:
            setattr(kernels, name, getattr(be, name))
        cfg = RunConfig()
        cfg.train.total_iters = 12
        cfg.train.warmup_iters = 2
        ds = synth_shapes(4, 64, 64, 4, seed=1)
        model = SegModel(cfg.encoder_config(), cfg.decoder_width, seed=0)
        t0 = time.perf_counter()
        train_loop(model, ds, cfg.train)
        return (time.perf_counter() - t0) / cfg.train.total_iters
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def main() -> int:
    rng = np.random.default_rng(0)
    backends = available_backends()
    print(f"available backends: {backends} (default: {kernels.backend_name()})")
    results = {b: dict(bench_kernels(b, rng)) for b in backends}
    labels = list(next(iter(results.values())))
    width = max(len(l) for l in labels)
    header = f"{'kernel':<{width}}" + "".join(f" {b + ' (ms)':>14}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    for label in labels:
        line = f"{label:<{width}}"
        for b in backends:
            line += f" {1e3 * results[b][label]:>14.3f}"
        if len(backends) == 2:
            line += f" {results['numpy'][label] / results['cython'][label]:>8.2f}x"
        print(line)

    print()
    steps = {b: bench_train_step(b) for b in backends}
    for b, sec in steps.items():
        print(f"toy train step ({b}): {1e3 * sec:.1f} ms/iter")
    if len(steps) == 2:
        print(f"end-to-end speedup: {steps['numpy'] / steps['cython']:.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
