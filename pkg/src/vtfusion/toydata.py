"""Generated toy fixture: flat noisy textures, with square pastes as test anomalies.

Written to disk in the MVTec-AD directory layout so the same loader serves the
toy fixture and the real dataset.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

BASE_COLOR = (0.55, 0.50, 0.42)


@dataclass
class ToySet:
    train: np.ndarray  # (n, H, W, 3)
    test_good: np.ndarray
    test_bad: np.ndarray
    test_masks: np.ndarray  # (n_bad, H, W) bool


def flat_texture(rng, size=64, color=BASE_COLOR):
    yy, xx = np.mgrid[:size, :size] / size
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.03 * np.sin(2 * np.pi * 6 * (xx + 0.3 * yy) + phase)
    img = np.asarray(color)[None, None, :] + stripes[..., None]
    img = img + rng.normal(0.0, 0.01, size=(size, size, 3))
    return np.clip(img, 0.0, 1.0)


def square_paste(img, rng, side_range=(8, 16)):
    """Paste a square of contrasting texture; returns (image, mask)."""
    size = img.shape[0]
    side = int(rng.integers(side_range[0], side_range[1] + 1))
    top, left = (int(v) for v in rng.integers(0, size - side + 1, size=2))
    shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.35)
    tint = rng.uniform(-0.1, 0.1, size=3)
    patch = img[top:top + side, left:left + side] + shift + tint
    patch = patch + rng.normal(0.0, 0.05, size=patch.shape)
    out = img.copy()
    out[top:top + side, left:left + side] = np.clip(patch, 0.0, 1.0)
    mask = np.zeros(img.shape[:2], dtype=bool)
    mask[top:top + side, left:left + side] = True
    return out, mask


def make_toy_set(seed=0, n_train=8, n_good=12, n_bad=12, size=64) -> ToySet:
    rng = np.random.default_rng([seed, 7919])
    train = np.stack([flat_texture(rng, size) for _ in range(n_train)])
    good = np.stack([flat_texture(rng, size) for _ in range(n_good)])
    bad, masks = zip(*(square_paste(flat_texture(rng, size), rng) for _ in range(n_bad)))
    return ToySet(train, good, np.stack(bad), np.stack(masks))


def quantize(img):
    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def write_toy_dataset(root, category="toy", seed=0, **kwargs) -> Path:
    """Write the toy set as ``root/category/{train,test,ground_truth}/...`` PNGs."""
    toy = make_toy_set(seed, **kwargs)
    base = Path(root) / category
    dirs = {
        "train": base / "train" / "good",
        "good": base / "test" / "good",
        "bad": base / "test" / "square",
        "gt": base / "ground_truth" / "square",
    }
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(toy.train):
        Image.fromarray(quantize(img)).save(dirs["train"] / f"{i:03d}.png")
    for i, img in enumerate(toy.test_good):
        Image.fromarray(quantize(img)).save(dirs["good"] / f"{i:03d}.png")
    for i, (img, mask) in enumerate(zip(toy.test_bad, toy.test_masks)):
        Image.fromarray(quantize(img)).save(dirs["bad"] / f"{i:03d}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(dirs["gt"] / f"{i:03d}_mask.png")
    return base
