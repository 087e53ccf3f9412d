"""Command-line entry point: ``vtfusion {synth,train,eval,predict,visualize,make-toy}``.

Exit codes: 0 success, 2 usage, 3 config, 4 data, 5 load, 6 training abort.
Failures print one line ``vtfusion: error[<category>]: <message>`` to stderr.

Seeds: every stochastic step derives its generator from the root seed (and the
sample index), so ``--workers`` > 1 changes throughput only, never results.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as runconfig
from .errors import DataError, VTFusionError
from .evalharness import evaluate, load_dataset, read_image, render_overlay, sample_episode
from .synth import ANOMALY_TYPES, synthesize
from .toydata import quantize, write_toy_dataset
from .trainer import ModelCheckpoint, predict, train

log = logging.getLogger("vtfusion")


def _overrides(args, mapping):
    out = {}
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[dotted] = value
    for item in getattr(args, "set", None) or []:
        key, value = runconfig.parse_set_option(item)
        out[key] = value
    return out


def cmd_synth(args):
    cfg, prov = runconfig.resolve(args.config, _overrides(args, {"seed": "train.synth.seed"}))
    src, dst = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise DataError(f"input directory not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp"})
    if not files:
        raise DataError(f"no images in {src}")
    dst.mkdir(parents=True, exist_ok=True)
    synth_cfg = replace(cfg.train.synth, anomaly_type=args.type, seed=args.seed)
    jobs = [(i, path, k) for i, path in enumerate(files) for k in range(args.count)]

    def run(job):
        i, path, k = job
        rng = np.random.default_rng([args.seed, i, k])
        res = synthesize(read_image(path), synth_cfg, rng)
        Image.fromarray(quantize(res.image)).save(dst / f"{path.stem}_aug{k}.png")
        Image.fromarray(res.mask.astype(np.uint8) * 255).save(dst / f"{path.stem}_aug{k}_mask.png")
        return res.anomaly_type

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            kinds = list(pool.map(run, jobs))
    else:
        kinds = [run(j) for j in jobs]
    runconfig.dump(cfg, prov, dst / "resolved_config.yaml")
    print(f"wrote {len(kinds)} synthetic images to {dst}")
    return 0


def cmd_train(args):
    cfg, prov = runconfig.resolve(
        args.config,
        _overrides(args, {
            "data": "data.root", "category": "data.category", "k": "train.k_shots", "seed": "train.seed",
            "iterations": "train.iterations", "workers": "train.workers",
        }),
    )
    if not cfg.data.root or not cfg.data.category:
        raise DataError("train needs --data and --category (or data.root / data.category in the config)")
    index = load_dataset(cfg.data.root, cfg.data.category)
    episode = sample_episode(index, cfg.train.k_shots, cfg.train.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    shots = [read_image(p) for p in episode.shots]
    ckpt = train(shots, cfg.train, cfg.backbone, log_path=out.with_suffix(".log.jsonl"))
    ckpt.save(out)
    runconfig.dump(cfg, prov, out.with_suffix(".config.yaml"))
    (out.with_suffix(".episode.json")).write_text(
        json.dumps({"category": episode.category, "seed": episode.seed, "shots": [p.name for p in episode.shots]}, indent=2)
    )
    print(f"saved checkpoint {out} (digest {ckpt.digest()[:16]})")
    return 0


def cmd_eval(args):
    ckpt = ModelCheckpoint.load(args.ckpt)
    overrides = _overrides(args, {"data": "data.root", "category": "data.category", "k": "train.k_shots", "seed": "train.seed"})
    cfg, prov = runconfig.resolve(args.config, overrides)
    category = args.category or ckpt.config.category
    k = args.k if args.k is not None else ckpt.config.k_shots
    seed = args.seed if args.seed is not None else ckpt.config.seed
    if not cfg.data.root:
        raise DataError("eval needs --data")
    index = load_dataset(cfg.data.root, category)
    episode = sample_episode(index, k, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(ckpt, episode, max_fpr=args.max_fpr, per_image_pixel_auroc=args.per_image,
                      overlay_dir=out / "overlays" if args.overlays else None)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    runconfig.dump(cfg, prov, out / "resolved_config.yaml")
    print(report.table())
    return 0


def cmd_predict(args):
    ckpt = ModelCheckpoint.load(args.ckpt)
    img = read_image(args.image)
    score, amap = predict(ckpt, img)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    np.save(out / f"{stem}_map.npy", amap)
    Image.fromarray(quantize(amap)).save(out / f"{stem}_map.png")
    print(f"{score:.6f}")
    return 0


def cmd_visualize(args):
    img = read_image(args.image)
    if args.map:
        amap = np.load(args.map)
    elif args.ckpt:
        _, amap = predict(ModelCheckpoint.load(args.ckpt), img)
    else:
        raise DataError("visualize needs --map or --ckpt")
    path = render_overlay(img, amap, args.out)
    print(path)
    return 0


def cmd_make_toy(args):
    base = write_toy_dataset(args.out, category=args.category, seed=args.seed)
    print(base)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vtfusion", description="Few-shot vision-text anomaly detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic anomalies and masks for every image in a folder")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--type", choices=list(ANOMALY_TYPES) + ["mix"], default="mix")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--config")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a k-shot episode and save a checkpoint")
    t.add_argument("--data")
    t.add_argument("--category")
    t.add_argument("--k", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--workers", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a category's test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--category")
    e.add_argument("--k", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--max-fpr", type=float, default=0.3)
    e.add_argument("--per-image", action="store_true", help="mean per-image pixel AUROC instead of pooled")
    e.add_argument("--overlays", action="store_true", help="also write heat-map overlays")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="score one image; prints the score, writes the map")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    v = sub.add_parser("visualize", help="write a heat-map overlay for an image")
    v.add_argument("--image", required=True)
    v.add_argument("--map", help=".npy anomaly map")
    v.add_argument("--ckpt", help="compute the map with this checkpoint instead")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_visualize)

    m = sub.add_parser("make-toy", help="write the generated toy fixture in MVTec layout")
    m.add_argument("--out", required=True)
    m.add_argument("--category", default="toy")
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help (0) or usage error (2)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VTFusionError as exc:
        print(f"vtfusion: error[{exc.category}]: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"vtfusion: error[data]: {exc}".replace("\n", " "), file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
