#!/usr/bin/env python3
"""Timing comparison between the compiled kernels and the pure numpy
fallback on realistic workloads: signed distance transform, descriptor
evaluation over the band of interest, node split search, forest
prediction, and graph-cut refinement.

    python3 benchmarks/bench_backends.py --dims 64 --gc-dims 12 --repeats 3

The pure backend exists for portability and as an executable reference
for the compiled one (the test suite checks they agree bit for bit), so
large gaps here are expected.
"""
import argparse
import time

import numpy as np

import ctxforest as cf
import ctxforest._kernels as K
from ctxforest.features import (ContextPack, FeatureContext, N_CLASSES,
                                descriptors_to_arrays, sample_feature_pool,
                                sample_training_voxels, CLASS_PALETTE)
from ctxforest.forest import train_forest
from ctxforest.graphcut import EnergyParams, alpha_expansion
from ctxforest.phantom import PhantomSpec, generate_phantom


def phantom_spec(dims):
    s = dims / 64.0
    scale = lambda rows: tuple(tuple(x * s for x in row) for row in rows)
    return PhantomSpec(seed=3, dims=(dims, dims, dims),
                       centers_mm=scale(PhantomSpec.centers_mm),
                       radii_mm=scale(PhantomSpec.radii_mm),
                       subject_jitter_mm=1.5 * s, radius_jitter_mm=1.0 * s,
                       scan_jitter_mm=0.5 * s,
                       shell_mm=(2.2 * min(1.0, s), 3.6 * min(1.0, s)))


def timed(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(name, fn, repeats, rows):
    out = {}
    for backend, mod in K.available_backends().items():
        old = K.impl
        K.impl = mod
        try:
            out[backend] = timed(fn, repeats)
        finally:
            K.impl = old
    pure, compiled = out["pure"], out.get("compiled")
    if compiled is None:
        rows.append(f"{name:<26s} {pure:>9.3f}s   (extension not built)")
    else:
        rows.append(f"{name:<26s} {pure:>9.3f}s {compiled:>11.4f}s "
                    f"{pure / compiled:>8.1f}x")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", type=int, default=64,
                    help="phantom grid edge for the forest kernels")
    ap.add_argument("--gc-dims", type=int, default=12,
                    help="grid edge for the graph-cut benchmark (the pure "
                         "max-flow is slow; keep this modest)")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    vol, bone, lms, gt = generate_phantom(phantom_spec(args.dims), 0)
    feat = cf.FeatureConfig(pool_size=40, seed=5)
    ctx = FeatureContext(vol, bone, lms, feat)
    pack = ContextPack([ctx])
    band = ctx.band
    print(f"grid {vol.dims}, band {band.size} voxels, "
          f"backends: {', '.join(K.available_backends())}")

    rows = []
    femur = (bone.labels == 1).astype(np.uint8)
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    bench("edt_squared", lambda: K.impl.edt_squared(femur, nx, ny, nz, sx, sy, sz),
          args.repeats, rows)

    rng = np.random.default_rng(9)
    pool = sample_feature_pool(rng, feat, 0, pack.landmark_counts)
    desc = descriptors_to_arrays(pool)
    vols = np.zeros(band.size, dtype=np.int32)
    bench("eval_descriptors (band)",
          lambda: K.impl.eval_descriptors(*pack.kernel_args(), *desc, vols, band),
          args.repeats, rows)

    s_idx, s_lab = sample_training_voxels(rng, ctx, gt, 1200)
    s_vol = np.zeros(s_idx.size, dtype=np.int32)
    from ctxforest.forest import log_table

    frac = rng.uniform(0.0, 1.0, size=(len(pool), 8))
    ids = np.arange(s_idx.size, dtype=np.int64)
    tab = log_table(s_idx.size + 1)
    bench("node_split (root)",
          lambda: K.impl.node_split(*pack.kernel_args(), *desc, s_vol, s_idx,
                                    s_lab, ids, frac, 4, N_CLASSES, tab),
          args.repeats, rows)

    forest = train_forest(pack, s_vol, s_idx, s_lab,
                          cf.ForestConfig(num_trees=4, max_depth=10), feat)
    bench("forest predict (band)", lambda: forest.predict(pack, 0, band),
          args.repeats, rows)

    d = args.gc_dims
    n = d * d * d
    gvol = cf.Volume((d, d, d), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
                     rng.normal(100, 30, n).astype(np.float32))
    probs = rng.dirichlet((1.0, 1.0, 1.0, 1.0), size=n).T[1:].copy()
    gband = np.arange(n, dtype=np.int64)
    init_lab = np.zeros(n, dtype=np.uint8)
    init = cf.LabelVolume((d, d, d), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0),
                          init_lab, CLASS_PALETTE)
    bench(f"alpha_expansion ({d}^3)",
          lambda: alpha_expansion(probs, gvol, gband, init, EnergyParams()),
          args.repeats, rows)

    print(f"{'kernel':<26s} {'pure':>10s} {'compiled':>12s} {'speedup':>9s}")
    for row in rows:
        print(row)


if __name__ == "__main__":
    main()
