"""MVTec-AD style dataset indexing, k-shot episodes, evaluation runs and reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, LoadError
from .metrics import auroc, pixel_auroc, pro
from .trainer import MAX_SHOTS, ModelCheckpoint

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass
class CategoryIndex:
    category: str
    root: Path
    train_good: list[Path]
    test_good: list[Path]
    test_abnormal: list[tuple[Path, Path]]


@dataclass
class EpisodeSplit:
    shots: list[Path]
    test_normal: list[Path]
    test_abnormal: list[tuple[Path, Path]]
    category: str
    seed: int

    def __post_init__(self):
        if len(self.shots) > MAX_SHOTS:
            raise ConfigError(f"at most {MAX_SHOTS} shots are allowed")
        test = set(self.test_normal) | {p for p, _ in self.test_abnormal}
        if test & set(self.shots):
            raise DataError("shots overlap the test set")


def _images(directory: Path) -> list[Path]:
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, category: str) -> CategoryIndex:
    """Index ``root/category`` laid out as train/good, test/<defect>, ground_truth/<defect>."""
    base = Path(root) / category
    if not (base / "train" / "good").is_dir():
        raise DataError(f"missing directory {base / 'train' / 'good'}")
    train_good = _images(base / "train" / "good")
    test_dir = base / "test"
    test_good = _images(test_dir / "good")
    abnormal = []
    defects = sorted(d for d in test_dir.iterdir() if d.is_dir() and d.name != "good") if test_dir.is_dir() else []
    for defect in defects:
        gt_dir = base / "ground_truth" / defect.name
        for img in _images(defect):
            candidates = sorted(gt_dir.glob(f"{img.stem}_mask.*")) if gt_dir.is_dir() else []
            if not candidates:
                raise LoadError(f"no ground-truth mask for {img} (expected {gt_dir / (img.stem + '_mask.*')})")
            abnormal.append((img, candidates[0]))
    return CategoryIndex(category, base, train_good, test_good, abnormal)


def sample_episode(index: CategoryIndex, k: int, seed: int) -> EpisodeSplit:
    """Uniform draw of k training shots without replacement."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > len(index.train_good):
        raise ConfigError(f"k={k} exceeds the {len(index.train_good)} available normal training images")
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(len(index.train_good), size=k, replace=False).tolist())
    return EpisodeSplit(
        shots=[index.train_good[i] for i in picks],
        test_normal=list(index.test_good),
        test_abnormal=list(index.test_abnormal),
        category=index.category,
        seed=seed,
    )


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path, shape=None) -> np.ndarray:
    """Binary mask; grey levels above 127 count as anomalous."""
    with Image.open(path) as im:
        im = im.convert("L")
        if shape is not None and im.size != (shape[1], shape[0]):
            im = im.resize((shape[1], shape[0]), Image.NEAREST)
        return np.asarray(im) > 127


@dataclass
class MetricReport:
    category: str
    k: int
    seed: int
    checkpoint_digest: str
    image_auroc: float
    pixel_auroc: float
    pro: float
    n_normal: int
    n_abnormal: int
    rows: list = field(default_factory=list)

    def key(self) -> str:
        return f"{self.category}/k{self.k}/seed{self.seed}"

    def to_json(self) -> str:
        return json.dumps({self.key(): asdict(self)}, indent=2, sort_keys=True)

    def table(self) -> str:
        header = f"{'category':<16}{'k':>3}{'seed':>6}{'img AUROC':>11}{'pix AUROC':>11}{'PRO':>8}"
        line = (
            f"{self.category:<16}{self.k:>3}{self.seed:>6}"
            f"{100 * self.image_auroc:>10.1f}%{100 * self.pixel_auroc:>10.1f}%{100 * self.pro:>7.1f}%"
        )
        return header + "\n" + line


def evaluate(ckpt: ModelCheckpoint, episode: EpisodeSplit, batch_size: int = 16, max_fpr: float = 0.3,
             per_image_pixel_auroc: bool = False, overlay_dir=None) -> MetricReport:
    """Score every test image of ``episode`` with ``ckpt`` and compute all metrics."""
    predictor = ckpt.predictor()
    items = [(p, None) for p in episode.test_normal] + list(episode.test_abnormal)
    if not items:
        raise DataError("episode has no test images")
    scores, labels, maps, masks = [], [], [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        imgs = [read_image(p) for p, _ in chunk]
        shapes = {im.shape for im in imgs}
        if len(shapes) == 1:
            s, m = predictor(np.stack(imgs))
            pairs = list(zip(s, m))
        else:
            pairs = [predictor(im) for im in imgs]
        for (path, mask_path), img, (score, amap) in zip(chunk, imgs, pairs):
            gt = read_mask(mask_path, img.shape[:2]) if mask_path else np.zeros(img.shape[:2], dtype=bool)
            scores.append(float(score))
            labels.append(mask_path is not None)
            maps.append(amap)
            masks.append(gt)
            if overlay_dir is not None:
                render_overlay(img, amap, Path(overlay_dir) / f"{path.parent.name}_{path.stem}.png")
    return MetricReport(
        category=episode.category,
        k=len(episode.shots),
        seed=episode.seed,
        checkpoint_digest=ckpt.digest(),
        image_auroc=auroc(scores, labels),
        pixel_auroc=pixel_auroc(maps, masks, per_image=per_image_pixel_auroc),
        pro=pro(maps, masks, max_fpr),
        n_normal=len(episode.test_normal),
        n_abnormal=len(episode.test_abnormal),
        rows=[{"image": f"{p.parent.name}/{p.name}", "label": int(lbl), "score": s} for (p, _), lbl, s in zip(items, labels, scores)],
    )


def render_overlay(img, amap, out_path, alpha=0.5, cmap="jet"):
    """Blend a [0, 1] anomaly map, colour-mapped, over the image and save it as PNG."""
    from matplotlib import colormaps

    img = np.asarray(img, dtype=np.float64)
    amap = np.asarray(amap, dtype=np.float64)
    if img.shape[:2] != amap.shape:
        raise ValueError(f"image {img.shape[:2]} and map {amap.shape} differ in size")
    heat = colormaps[cmap](np.clip(amap, 0.0, 1.0))[..., :3]
    blend = (1 - alpha) * img + alpha * heat
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(np.clip(blend, 0, 1) * 255).astype(np.uint8)).save(out_path)
    return out_path
