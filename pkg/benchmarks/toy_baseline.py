"""Train on the generated toy set and record held-out metrics per seed and fusion mode.

    python benchmarks/toy_baseline.py [--seeds 0 1 2 3] [--iterations 500] [--out benchmarks/toy_baseline.json]

The end-to-end test thresholds (loss drop, image and pixel AUROC) sit below the
worst seed recorded here.
"""
import argparse
import json
import time

import numpy as np

from vtfusion.metrics import auroc, pixel_auroc, pro
from vtfusion.toydata import make_toy_set
from vtfusion.trainer import TrainConfig, train


def held_out(ckpt, toy):
    predict = ckpt.predictor()
    s_good, m_good = predict(toy.test_good)
    s_bad, m_bad = predict(toy.test_bad)
    labels = np.r_[np.zeros(len(s_good)), np.ones(len(s_bad))]
    maps = list(m_good) + list(m_bad)
    masks = [np.zeros(m.shape, bool) for m in m_good] + list(toy.test_masks)
    return {
        "image_auroc": auroc(np.r_[s_good, s_bad], labels),
        "pixel_auroc": pixel_auroc(maps, masks),
        "pro": pro(maps, masks),
        "mean_score_good": float(s_good.mean()),
        "mean_score_bad": float(s_bad.mean()),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--out", default="benchmarks/toy_baseline.json")
    args = ap.parse_args()

    toy = make_toy_set(seed=0)
    rows = []
    for mode in ("mpf", "average"):
        for seed in args.seeds:
            cfg = TrainConfig(k_shots=args.k, iterations=args.iterations, seed=seed, fusion_mode=mode)
            start = time.perf_counter()
            ckpt = train(list(toy.train[: args.k]), cfg)
            row = {"fusion_mode": mode, "seed": seed, "seconds": round(time.perf_counter() - start, 1),
                   "loss_first": ckpt.log[0]["total"], "loss_last": ckpt.log[-1]["total"]}
            row["loss_drop"] = 1.0 - row["loss_last"] / row["loss_first"]
            row.update(held_out(ckpt, toy))
            rows.append(row)
            print(f"{mode:<8} seed {seed}: loss drop {100 * row['loss_drop']:.0f}%  image {row['image_auroc']:.3f}  "
                  f"pixel {row['pixel_auroc']:.3f}  pro {row['pro']:.3f}  ({row['seconds']}s)")
    doc = {"k_shots": args.k, "iterations": args.iterations, "rows": rows}
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2)


if __name__ == "__main__":
    main()
