"""Compare the training-loop backends on the ensemble workload.

Usage: python benchmarks/bench_fastpath.py [--members N] [--steps N] [--width N]
"""

import argparse
import time

import numpy as np

from tangentlab.dataio import synth_gaussian
from tangentlab.fastpath import _HAVE_TORCH, train_ensemble_gd
from tangentlab.network import Architecture


def bench(backend, dtype, arch, train, test_inputs, members, steps):
    seeds = list(range(members))
    t0 = time.perf_counter()
    train_ensemble_gd(
        arch, seeds, train, test_inputs, eta=0.05, steps=steps,
        record_steps=[0, steps], dtype=dtype, backend=backend,
    )
    dt = time.perf_counter() - t0
    per = dt / (members * steps) * 1e3
    print(f"{backend:>6s} {np.dtype(dtype).name}: {dt:7.2f} s total, {per:6.2f} ms/member-step")
    return dt


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--members", type=int, default=4)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--width", type=int, default=1024)
    ap.add_argument("--count", type=int, default=32)
    args = ap.parse_args()

    arch = Architecture(16, (args.width,) * 3, 1, "tanh", 1.5, 0.0)
    train = synth_gaussian(16, args.count, seed=0)
    test_inputs = synth_gaussian(16, 10, seed=1).inputs
    print(f"3x{args.width} tanh, {args.count} examples, {args.members} members x {args.steps} steps")

    bench("numpy", np.float64, arch, train, test_inputs, args.members, args.steps)
    if _HAVE_TORCH:
        bench("torch", np.float64, arch, train, test_inputs, args.members, args.steps)
        bench("torch", np.float32, arch, train, test_inputs, args.members, args.steps)
    else:
        print("torch not installed; fast backend unavailable")


if __name__ == "__main__":
    main()
