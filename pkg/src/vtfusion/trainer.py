"""Few-shot training loop, model checkpoints and inference."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _dc
from .backbone import (
    AdaptiveImageEncoder,
    AdaptiveTextEncoder,
    BackboneSpec,
    MultiLevelFeatures,
    build_frozen,
    frozen_digest,
    to_batch,
)
from .errors import ConfigError, LoadError
from .fusion import FusionBlock, FusionParams, SegmentationNet, average_fuse, fuse, image_score, segment
from .losses import LossConfig, afs_loss, nfc_loss, seg_loss, total_loss
from .prototypes import PrototypeSet, init_prototypes, vision_prediction
from .synth import SynthConfig, synthesize
from .textflow import DEFAULT_TEMPERATURE, build_prompts, text_prediction

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MAX_SHOTS = 8


@dataclass(frozen=True)
class TrainConfig:
    k_shots: int = 2
    iterations: int = 1000
    batch_size: int = 8
    lr_aie: float = 1e-3
    lr_ate_mpf: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    fusion: FusionParams = field(default_factory=FusionParams)
    temperature: float = DEFAULT_TEMPERATURE
    fusion_mode: str = "mpf"  # "average" replaces the fusion block by map averaging
    seed: int = 0
    category: str = "toy"
    object_label: str = "object"
    workers: int = 1

    def __post_init__(self):
        if not 1 <= self.k_shots <= MAX_SHOTS:
            raise ConfigError(f"k_shots must be in [1, {MAX_SHOTS}] (few-shot setting allows at most 8), got {self.k_shots}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        if not (self.lr_aie > 0 and self.lr_ate_mpf > 0):
            raise ConfigError("learning rates must be > 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.fusion_mode not in ("mpf", "average"):
            raise ConfigError("fusion_mode must be 'mpf' or 'average'")
        if not self.object_label.strip():
            raise ConfigError("object_label must be non-empty")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class FusedMaps:
    m_v: torch.Tensor
    m_t: torch.Tensor
    m_vt: torch.Tensor
    m_f: torch.Tensor


class VTFusionModel(torch.nn.Module):
    """Frozen backend + adaptive encoders + fusion block + segmentation head."""

    def __init__(self, spec: BackboneSpec, params: FusionParams, temperature=DEFAULT_TEMPERATURE, fusion_mode="mpf"):
        super().__init__()
        image_backend, text_backend = build_frozen(spec)
        self.spec = spec
        self.temperature = temperature
        self.fusion_mode = fusion_mode
        self.aie = AdaptiveImageEncoder(spec, image_backend)
        self.ate = AdaptiveTextEncoder(spec, text_backend)
        self.fusion = FusionBlock(params)
        self.seg = SegmentationNet(params)
        self.prototypes: PrototypeSet | None = None

    def frozen_modules(self):
        return [self.aie.frozen, self.ate.frozen]

    def frozen_digest(self) -> str:
        return hashlib.sha256("".join(frozen_digest(m) for m in self.frozen_modules()).encode()).hexdigest()

    def trainable_parameters(self):
        """{"aie": [...], "ate_mpf": [...]} - the only tensors the optimizer may touch."""
        aie = list(self.aie.linear.parameters()) + list(self.aie.adaptor.parameters())
        rest = list(self.ate.adapter.parameters()) + list(self.seg.parameters())
        if self.fusion_mode == "mpf":
            rest += list(self.fusion.parameters())
        return {"aie": aie, "ate_mpf": rest}

    def trainable_state(self) -> dict:
        return {
            k: v.detach().clone()
            for k, v in self.state_dict().items()
            if not (k.startswith("aie.frozen.") or k.startswith("ate.frozen."))
        }

    def encode_image(self, x: torch.Tensor, mode: str = "eval") -> MultiLevelFeatures:
        self.train(mode == "train")
        return self.aie(x)

    def encode_text(self, object_label: str) -> torch.Tensor:
        return self.ate(build_prompts(object_label).prompts)

    def maps(self, feats: MultiLevelFeatures, text: torch.Tensor, out_size) -> FusedMaps:
        if self.prototypes is None:
            raise RuntimeError("prototypes are not initialized")
        m_v = vision_prediction(feats, self.prototypes)
        m_t = text_prediction(feats, text, self.temperature)
        m_vt = fuse(m_v, m_t, self.fusion) if self.fusion_mode == "mpf" else average_fuse(m_v, m_t)
        m_f = segment(m_v, m_t, m_vt, self.seg, out_size)
        return FusedMaps(m_v, m_t, m_vt, m_f)


def _state_digest(state: dict) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(state.items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ModelCheckpoint:
    trainable: dict
    prototypes: PrototypeSet
    backbone: BackboneSpec
    config: TrainConfig
    frozen_digest: str
    log: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    _predictor: object = field(default=None, repr=False, compare=False)

    def digest(self) -> str:
        state = dict(self.trainable)
        state["__prototypes__"] = self.prototypes.anchors
        h = hashlib.sha256(_state_digest(state).encode())
        h.update(json.dumps(_dc.to_dict(self.backbone), sort_keys=True).encode())
        h.update(json.dumps(_dc.to_dict(self.config), sort_keys=True).encode())
        return h.hexdigest()

    def to_payload(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "trainable": self.trainable,
            "prototypes": {"anchors": self.prototypes.anchors, "source": json.dumps(self.prototypes.source)},
            "backbone": json.dumps(_dc.to_dict(self.backbone)),
            "config": json.dumps(_dc.to_dict(self.config)),
            "frozen_digest": self.frozen_digest,
            "log": json.dumps(self.log),
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.to_payload(), buf)
        path.write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise LoadError(f"checkpoint not found: {path}") from None
        except Exception as exc:
            raise LoadError(f"unreadable checkpoint {path}: {exc}") from None
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise LoadError(f"checkpoint schema {version} is not supported (expected {SCHEMA_VERSION})")
        return cls(
            trainable=payload["trainable"],
            prototypes=PrototypeSet(
                anchors=payload["prototypes"]["anchors"],
                frozen=True,
                source=json.loads(payload["prototypes"]["source"]),
            ),
            backbone=BackboneSpec.from_dict(json.loads(payload["backbone"])),
            config=_dc.from_dict(TrainConfig, json.loads(payload["config"])),
            frozen_digest=payload["frozen_digest"],
            log=json.loads(payload["log"]),
        )

    def build_model(self) -> VTFusionModel:
        model = VTFusionModel(self.backbone, self.config.fusion, self.config.temperature, self.config.fusion_mode)
        if model.frozen_digest() != self.frozen_digest:
            raise LoadError("frozen backend weights do not match the checkpoint")
        missing, unexpected = model.load_state_dict(self.trainable, strict=False)
        missing = [k for k in missing if not (k.startswith("aie.frozen.") or k.startswith("ate.frozen."))]
        if missing or unexpected:
            raise LoadError(f"checkpoint/model mismatch: missing {missing}, unexpected {unexpected}")
        model.prototypes = self.prototypes
        return model.eval()

    def predictor(self) -> "Predictor":
        if self._predictor is None:
            self._predictor = Predictor(self)
        return self._predictor


class Predictor:
    """Eval-mode inference with a model built once from a checkpoint."""

    def __init__(self, ckpt: ModelCheckpoint):
        self.ckpt = ckpt
        self.model = ckpt.build_model()
        self.label = ckpt.config.object_label

    @torch.no_grad()
    def __call__(self, images, out_size=None):
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        if out_size is None:
            out_size = arr.shape[1:3]
        x = to_batch(arr, self.model.spec)
        self.model.eval()
        feats = self.model.aie(x)
        text = self.model.encode_text(self.label)
        m_f = self.model.maps(feats, text, out_size).m_f
        scores = image_score(m_f).numpy().astype(np.float64)
        maps = m_f.numpy().astype(np.float64)
        if single:
            return float(scores[0]), maps[0]
        return scores, maps


def predict(ckpt: ModelCheckpoint, img):
    """(image score, H x W anomaly map) for one H x W x 3 image."""
    return ckpt.predictor()(img)


def _synth_batch(shots, picks, cfg: TrainConfig, step: int, workers: int):
    def one(j):
        rng = np.random.default_rng([cfg.seed, step, j])
        return synthesize(shots[picks[j]], cfg.synth, rng)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, range(len(picks))))
    return [one(j) for j in range(len(picks))]


def build_model(cfg: TrainConfig, spec: BackboneSpec) -> VTFusionModel:
    torch.manual_seed(cfg.seed)
    return VTFusionModel(spec, cfg.fusion, cfg.temperature, cfg.fusion_mode)


def train(normal_images, cfg: TrainConfig, spec: BackboneSpec | None = None, log_path=None,
          model: VTFusionModel | None = None) -> ModelCheckpoint:
    """Train on k normal shots; returns a checkpoint with final weights and the loss log.

    Prototypes are built once, before the loop, from the un-adapted features of the
    shots and stay frozen. Each iteration draws ``batch_size`` shots with
    replacement, synthesizes one abnormal counterpart per draw, and takes one Adam
    step on nfc + afs + lam * seg.
    """
    spec = spec or BackboneSpec()
    if normal_images is None or len(normal_images) == 0:
        raise ConfigError("at least one normal image is required")
    if len(normal_images) != cfg.k_shots:
        raise ConfigError(f"got {len(normal_images)} shots but k_shots={cfg.k_shots}")
    if model is None:
        model = build_model(cfg, spec)
    x_shots = to_batch(np.stack([np.asarray(im, dtype=np.float64) for im in normal_images]), spec)
    shots_np = x_shots.permute(0, 2, 3, 1).double().numpy()
    out_size = tuple(spec.input_size)

    with torch.no_grad():
        model.prototypes = init_prototypes(
            model.encode_image(x_shots, "eval"),
            source={"category": cfg.category, "k": cfg.k_shots, "seed": cfg.seed},
        )
    prompts = build_prompts(cfg.object_label).prompts
    groups = model.trainable_parameters()
    opt = torch.optim.Adam(
        [{"params": groups["aie"], "lr": cfg.lr_aie}, {"params": groups["ate_mpf"], "lr": cfg.lr_ate_mpf}],
        weight_decay=0.0,
    )
    records = []
    log_file = open(log_path, "w") if log_path else None
    try:
        for step in range(cfg.iterations):
            picks = np.random.default_rng([cfg.seed, step]).integers(0, cfg.k_shots, size=cfg.batch_size)
            synth = _synth_batch(shots_np, picks, cfg, step, cfg.workers)
            x_n = x_shots[torch.from_numpy(picks)]
            x_a = torch.from_numpy(np.stack([s.image for s in synth]).transpose(0, 3, 1, 2)).to(x_shots.dtype)
            masks = torch.from_numpy(np.stack([s.mask for s in synth])).to(x_shots.dtype)

            feats = model.encode_image(torch.cat([x_n, x_a]), "train")
            n = cfg.batch_size
            f_n = feats.stacked[:n]
            f_a = feats.stacked[n:]
            nfc = nfc_loss(f_n, model.prototypes, cfg.loss)
            afs = afs_loss(f_a, model.prototypes, cfg.loss)
            text = model.ate(prompts)
            fm = model.maps(feats, text, out_size)
            target = torch.cat([torch.zeros_like(masks), masks])
            seg = seg_loss(fm.m_f, target)
            total = total_loss(nfc, afs, seg, cfg.loss, step=step)

            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()

            rec = {k: float(v.detach()) for k, v in (("nfc", nfc), ("afs", afs), ("seg", seg), ("total", total))}
            rec = {"step": step, **rec}
            records.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if step % 100 == 0:
                log.info("step %d total %.5f (nfc %.5f afs %.5f seg %.5f)", step, rec["total"], rec["nfc"], rec["afs"], rec["seg"])
    finally:
        if log_file:
            log_file.close()

    model.eval()
    return ModelCheckpoint(
        trainable=model.trainable_state(),
        prototypes=model.prototypes,
        backbone=spec,
        config=cfg,
        frozen_digest=model.frozen_digest(),
        log=records,
    )
