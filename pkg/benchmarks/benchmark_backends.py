#!/usr/bin/env python3
"""Compare the numba and pure-numpy kernel backends.

The backend is fixed at import time by CROWDNMS_BACKEND, so this script
re-executes itself once per backend and prints a timing table. JIT
compilation happens during an untimed warmup pass.

Usage: python3 benchmarks/benchmark_backends.py [--proposals N] [--repeats R]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def make_workload(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 400, n)
    y = rng.uniform(0, 300, n)
    w = rng.uniform(10, 60, n)
    h = rng.uniform(10, 60, n)
    boxes = np.stack([x, y, w, h], axis=1)
    scores = rng.uniform(0.05, 1.0, n)
    dist = rng.uniform(0, 1, (n, n))
    dist = (dist + dist.T) / 2
    np.fill_diagonal(dist, np.nan)
    values = rng.normal(size=(8, 38, 50))
    roi = np.array([120.0, 90.0, 80.0, 70.0])
    return boxes, scores, dist, values, roi


def run_backend(n, repeats):
    from crowdnms import kernels

    boxes, scores, dist, values, roi = make_workload(n)
    cases = {
        "iou_matrix": lambda: kernels.iou_matrix(boxes),
        "greedy_nms": lambda: kernels.greedy_nms_kernel(boxes, scores, 0.5),
        "pairwise_nms": lambda: kernels.pairwise_nms_kernel(boxes, scores, 0.5, 0.5, dist),
        "soft_nms_linear": lambda: kernels.soft_nms_linear_kernel(boxes, scores, 0.5, 0.05),
        "soft_nms_gaussian": lambda: kernels.soft_nms_gaussian_kernel(boxes, scores, 0.5, 0.05),
        "roi_align": lambda: kernels.roi_align_kernel(values, 8.0, roi, 14),
    }
    results = {}
    for name, fn in cases.items():
        fn()  # warmup / JIT
        start = time.perf_counter()
        for _ in range(repeats):
            fn()
        results[name] = (time.perf_counter() - start) / repeats
    return kernels.BACKEND, results


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--proposals", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=50)
    parser.add_argument("--_child", action="store_true", help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args._child:
        backend, results = run_backend(args.proposals, args.repeats)
        print(json.dumps({"backend": backend, "results": results}))
        return

    rows = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, CROWDNMS_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, __file__, "--_child",
             "--proposals", str(args.proposals), "--repeats", str(args.repeats)],
            env=env, capture_output=True, text=True, check=True,
        )
        payload = json.loads(proc.stdout.strip().splitlines()[-1])
        rows[payload["backend"]] = payload["results"]

    print(f"\n{args.proposals} proposals, {args.repeats} repeats, mean seconds per call\n")
    print(f"{'kernel':<20} {'numpy':>12} {'numba':>12} {'speedup':>9}")
    for name in rows["numpy"]:
        a, b = rows["numpy"][name], rows["numba"][name]
        print(f"{name:<20} {a:>12.6f} {b:>12.6f} {a / b:>8.1f}x")


if __name__ == "__main__":
    main()
