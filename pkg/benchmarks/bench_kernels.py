"""Time the numba and numpy paths of each hot kernel side by side.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is warmed up once (so numba compilation is excluded) and checked to
give identical results on both paths before timing.
"""
import argparse
import json
import platform
import timeit

import numpy as np

from vtfusion import kernels


def _cases(rng):
    feats = rng.normal(size=(4 * 8 * 8 * 4, 32))
    anchors = rng.normal(size=(8 * 8 * 4, 32))

    masks = rng.uniform(size=(256, 256)) < 0.45

    n = 24 * 64 * 64
    scores = np.round(rng.uniform(size=n), 4)
    regions = np.where(rng.uniform(size=n) < 0.1, rng.integers(1, 40, size=n), 0)
    order = np.argsort(-scores, kind="stable")
    sizes = np.bincount(regions, minlength=40).astype(float)
    weight = np.zeros(40)
    weight[1:] = 1.0 / (39 * sizes[1:])
    sweep_args = (scores[order], regions[order].astype(np.int64), weight, float((regions == 0).sum()))

    verts = rng.integers(0, 256, size=(200, 2)).astype(np.int64)
    return {
        "nearest_sq_dist": (kernels.nearest_sq_dist_numba, kernels.nearest_sq_dist_numpy, (feats, anchors)),
        "label_components": (kernels.label_components_numba, kernels.label_components_numpy, (masks,)),
        "pro_sweep": (kernels.pro_sweep_numba, kernels.pro_sweep_numpy, sweep_args),
        "raster_polyline": (kernels.raster_polyline_numba, kernels.raster_polyline_numpy, (verts, 256, 256)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind == "f":
        # summation order differs between paths; integers and indices must match exactly
        return a.shape == b.shape and np.allclose(a, b, rtol=0, atol=1e-10)
    return np.array_equal(a, b)


def run(repeat=5, seed=0):
    rows = []
    for name, (fast, slow, args) in _cases(np.random.default_rng(seed)).items():
        ref_fast, ref_slow = fast(*args), slow(*args)
        if name == "label_components":
            # label ids may be numbered differently; compare the partition instead
            agree = ref_fast[1] == ref_slow[1] and _same(ref_fast[0] > 0, ref_slow[0] > 0)
        else:
            agree = _same(ref_fast, ref_slow)
        t_fast = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat))
        t_slow = min(timeit.repeat(lambda: slow(*args), number=1, repeat=repeat))
        rows.append({"kernel": name, "numba_ms": 1e3 * t_fast, "numpy_ms": 1e3 * t_slow,
                     "speedup": t_slow / t_fast, "agree": bool(agree)})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the rows to this file")
    args = ap.parse_args()
    rows = run(args.repeat)
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for r in rows:
        print(f"{r['kernel']:<18}{r['numba_ms']:>10.2f}{r['numpy_ms']:>10.2f}{r['speedup']:>8.1f}x  {r['agree']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"python": platform.python_version(), "machine": platform.machine(), "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
