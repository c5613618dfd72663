#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy reference.

Times the fused per-batch backward pass and the forward pass on synthetic
workloads shaped like the benchmark datasets (many small bags), where Python
call overhead dominates the numpy path. Run:

    python3 benchmarks/bench_kernels.py
"""

import argparse
import time

import numpy as np

from segmilcbm.kernels import HAVE_COMPILED, get_backend
from segmilcbm.milmodel import init_params
from segmilcbm.training import pack_bags, prepare_bags
from segmilcbm.bagio import Bag, Instance


def make_batch(rng, n_bags, n_instances, D, C):
    bags = []
    for i in range(n_bags):
        clip = rng.uniform(0, 1, size=(n_instances, C))
        bags.append(
            Bag(
                image_id=f"b{i}",
                label=int(rng.integers(0, 2)),
                instances=[
                    Instance(embedding=rng.normal(size=D), clip_scores=clip[j])
                    for j in range(n_instances)
                ],
            )
        )
    prepared = prepare_bags(bags, with_clip=True)
    return pack_bags(prepared, range(len(prepared)))


def time_fn(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()

    if not HAVE_COMPILED:
        print("compiled backend not built; showing numpy only")
    shapes = [
        ("benchmark-like", dict(n_bags=16, n_instances=5, D=16, C=12)),
        ("wide bags", dict(n_bags=16, n_instances=15, D=64, C=32)),
        ("large D", dict(n_bags=8, n_instances=15, D=2048, C=128)),
    ]
    rng = np.random.default_rng(0)
    header = f"{'workload':<16} {'op':<9} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, shape in shapes:
        params = init_params(
            num_classes=2,
            dim=shape["D"],
            num_concepts=shape["C"],
            attention="mlp",
            attention_hidden=32,
            seed=0,
        )
        packed = make_batch(rng, **shape)
        H_all, offsets, clip_all, labels = packed
        rows = {}
        for backend_name in ("numpy", "compiled") if HAVE_COMPILED else ("numpy",):
            backend = get_backend(backend_name)
            rows[backend_name, "backward"] = time_fn(
                lambda: backend.batch_backward(params, H_all, offsets, clip_all, labels, 0.1),
                args.repeats,
            )
            rows[backend_name, "forward"] = time_fn(
                lambda: backend.forward_many(params, H_all, offsets), args.repeats
            )
        for op in ("backward", "forward"):
            n = rows["numpy", op] * 1e3
            if HAVE_COMPILED:
                c = rows["compiled", op] * 1e3
                print(f"{name:<16} {op:<9} {n:>10.3f} {c:>12.3f} {n / c:>7.1f}x")
            else:
                print(f"{name:<16} {op:<9} {n:>10.3f} {'-':>12} {'-':>8}")


if __name__ == "__main__":
    main()
