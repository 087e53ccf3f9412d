"""Adaptive image and text encoders on top of a frozen feature backend.

Two backends share one contract:

* ``toy``: a fixed-seed patch-embedding network and a hashed bag-of-words text
  encoder. Small enough for finite-difference checks and fully offline.
* ``pretrained_vlm``: an OpenCLIP model loaded from a local weights file given by
  ``BackboneSpec.weights_path`` or the ``VTFUSION_CLIP_WEIGHTS`` env var.
  Nothing is downloaded.

Only the per-level linear maps, the 1x1 feature adaptors and the text adapter are
trainable. Features are returned channel-last, ``(B, h, w, c)``.
"""
from __future__ import annotations

import hashlib
import os
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, LoadError

WEIGHTS_ENV = "VTFUSION_CLIP_WEIGHTS"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    backend: str = "toy"
    levels: tuple[int, ...] = (0, 1, 2, 3)
    patch_grid: tuple[int, int] = (8, 8)
    image_channels_per_level: int = 24
    joint_dim: int = 32
    input_size: tuple[int, int] = (64, 64)
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    toy_seed: int = 1234
    model_name: str = "ViT-B-16-plus-240"
    weights_path: str | None = None

    def __post_init__(self):
        if self.backend not in ("toy", "pretrained_vlm"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if len(self.levels) < 1:
            raise ConfigError("at least one feature level is required")
        if any(lv < 0 for lv in self.levels) or len(set(self.levels)) != len(self.levels):
            raise ConfigError(f"invalid level indices {self.levels}")
        h, w = self.patch_grid
        if h <= 0 or w <= 0:
            raise ConfigError("patch_grid must be positive")
        if self.joint_dim <= 0 or self.image_channels_per_level <= 0:
            raise ConfigError("channel sizes must be positive")
        if self.backend == "toy":
            ih, iw = self.input_size
            if ih % h or iw % w or ih // h != iw // w:
                raise ConfigError("toy backend needs input_size to be a square-patch multiple of patch_grid")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        for key in ("levels", "patch_grid", "input_size", "mean", "std"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class MultiLevelFeatures:
    """Per-level ``(B, h, w, c)`` maps in the joint embedding space."""

    per_level: list[torch.Tensor]

    @property
    def stacked(self) -> torch.Tensor:
        return torch.cat(self.per_level, dim=-1)

    @classmethod
    def from_stacked(cls, stacked: torch.Tensor, num_levels: int) -> "MultiLevelFeatures":
        return cls(list(torch.chunk(stacked, num_levels, dim=-1)))


# ---------------------------------------------------------------------------
# frozen backends


def _seeded_normal(gen, shape, std):
    return torch.randn(shape, generator=gen, dtype=torch.float64).mul_(std).float()


class ToyImageBackend(nn.Module):
    """Patch embedding followed by 3x3 conv stages, all frozen, tanh activations."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c = spec.image_channels_per_level
        patch = spec.input_size[0] // spec.patch_grid[0]
        self.num_stages = max(spec.levels) + 1
        gen = torch.Generator().manual_seed(spec.toy_seed)
        self.embed = nn.Conv2d(3, c, patch, stride=patch)
        self.stages = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for _ in range(self.num_stages - 1))
        with torch.no_grad():
            self.embed.weight.copy_(_seeded_normal(gen, self.embed.weight.shape, 1.5 / np.sqrt(3 * patch * patch)))
            self.embed.bias.copy_(_seeded_normal(gen, self.embed.bias.shape, 0.1))
            for conv in self.stages:
                conv.weight.copy_(_seeded_normal(gen, conv.weight.shape, 1.5 / np.sqrt(9 * c)))
                conv.bias.copy_(_seeded_normal(gen, conv.bias.shape, 0.1))
        self.requires_grad_(False)

    def forward(self, x):
        out = [torch.tanh(self.embed(x))]
        for conv in self.stages:
            out.append(torch.tanh(conv(out[-1])) + out[-1])
        return out


class ToyTextBackend(nn.Module):
    """Hashed bag-of-words embedding with a frozen projection."""

    buckets = 512

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        gen = torch.Generator().manual_seed(spec.toy_seed + 1)
        self.register_buffer("table", _seeded_normal(gen, (self.buckets, spec.joint_dim), 1.0))
        self.register_buffer("proj", _seeded_normal(gen, (spec.joint_dim, spec.joint_dim), 1.0 / np.sqrt(spec.joint_dim)))

    def forward(self, prompts: list[str]) -> torch.Tensor:
        rows = []
        for prompt in prompts:
            ids = [zlib.crc32(tok.encode("utf-8")) % self.buckets for tok in prompt.lower().split()]
            rows.append(self.table[ids].sum(0))
        return torch.stack(rows) @ self.proj


class OpenClipBackend(nn.Module):
    """Frozen OpenCLIP image tower (multi-level patch tokens) and text tower."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        path = spec.weights_path or os.environ.get(WEIGHTS_ENV)
        if not path or not Path(path).is_file():
            raise LoadError(
                f"pretrained_vlm backend needs a local weights file (set weights_path or ${WEIGHTS_ENV}); got {path!r}"
            )
        try:
            import open_clip
        except ImportError as exc:
            raise LoadError("pretrained_vlm backend requires the open_clip_torch package") from exc
        try:
            model, _, _ = open_clip.create_model_and_transforms(spec.model_name, pretrained=path)
        except Exception as exc:  # open_clip raises a variety of types on bad files
            raise LoadError(f"could not load {spec.model_name} from {path}: {exc}") from exc
        self.model = model.eval().requires_grad_(False)
        self.tokenizer = open_clip.get_tokenizer(spec.model_name)
        self.spec = spec
        blocks = self.model.visual.transformer.resblocks
        if max(spec.levels) >= len(blocks):
            raise ConfigError(f"level {max(spec.levels)} exceeds the {len(blocks)} transformer blocks")
        self._captured: dict[int, torch.Tensor] = {}
        for lv in spec.levels:
            blocks[lv].register_forward_hook(self._hook(lv))

    def _hook(self, level):
        def fn(_module, _inp, out):
            self._captured[level] = out

        return fn

    def forward(self, x):
        self._captured.clear()
        self.model.encode_image(x)
        h, w = self.spec.patch_grid
        out = []
        for lv in self.spec.levels:
            tokens = self._captured[lv]
            if tokens.shape[0] != x.shape[0]:  # sequence-first layout
                tokens = tokens.permute(1, 0, 2)
            patches = tokens[:, 1:, :]
            if patches.shape[1] != h * w:
                raise ShapeError(f"backend produced {patches.shape[1]} patches, spec expects {h}x{w}")
            out.append(patches.reshape(x.shape[0], h, w, -1).permute(0, 3, 1, 2))
        return out

    def encode_text(self, prompts):
        return self.model.encode_text(self.tokenizer(prompts)).float()


# ---------------------------------------------------------------------------
# trainable adaptation layers


class AdaptiveImageEncoder(nn.Module):
    def __init__(self, spec: BackboneSpec, frozen: nn.Module):
        super().__init__()
        self.spec = spec
        self.frozen = frozen
        c, d = spec.image_channels_per_level, spec.joint_dim
        self.linear = nn.ModuleList(nn.Linear(c, d) for _ in spec.levels)
        self.adaptor = nn.ModuleList(nn.Conv2d(d, d, 1) for _ in spec.levels)
        with torch.no_grad():
            for conv in self.adaptor:
                conv.weight.copy_(torch.eye(d).reshape(d, d, 1, 1))
                conv.bias.zero_()
        self.register_buffer("pixel_mean", torch.tensor(spec.mean).reshape(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(spec.std).reshape(1, 3, 1, 1))

    def stage_outputs(self, x):
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != tuple(self.spec.input_size):
            raise ShapeError(f"expected (B, 3, {self.spec.input_size[0]}, {self.spec.input_size[1]}), got {tuple(x.shape)}")
        x = (x - self.pixel_mean.to(x.dtype)) / self.pixel_std.to(x.dtype)
        with torch.no_grad():
            stages = self.frozen(x)
        if isinstance(self.frozen, ToyImageBackend):
            stages = [stages[lv] for lv in self.spec.levels]
        return [s.detach() for s in stages]

    def project(self, stages):
        """Linear map per level; returns channel-last maps (pre-adaptor)."""
        return [lin(s.permute(0, 2, 3, 1)) for lin, s in zip(self.linear, stages)]

    def forward(self, x) -> MultiLevelFeatures:
        per_level = []
        for proj, conv in zip(self.project(self.stage_outputs(x)), self.adaptor):
            per_level.append(conv(proj.permute(0, 3, 1, 2)).permute(0, 2, 3, 1))
        return MultiLevelFeatures(per_level)


class TextAdapter(nn.Module):
    """Residual one-hidden-layer MLP; the output layer starts at zero (identity map)."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return x + self.fc2(F.relu(self.fc1(x)))


class AdaptiveTextEncoder(nn.Module):
    def __init__(self, spec: BackboneSpec, frozen: nn.Module):
        super().__init__()
        self.frozen = frozen
        self.adapter = TextAdapter(spec.joint_dim)
        self._cache: dict[tuple[str, str], torch.Tensor] = {}

    def raw(self, prompts: tuple[str, str]) -> torch.Tensor:
        # frozen text features are constant per prompt pair
        if prompts not in self._cache:
            with torch.no_grad():
                fn = self.frozen.encode_text if isinstance(self.frozen, OpenClipBackend) else self.frozen
                self._cache[prompts] = fn(list(prompts)).detach()
        return self._cache[prompts]

    def forward(self, prompts: tuple[str, str]) -> torch.Tensor:
        raw = self.raw(prompts).to(self.adapter.fc1.weight.dtype)
        return F.normalize(self.adapter(raw), dim=-1)


def build_frozen(spec: BackboneSpec):
    """Return (image_backend, text_backend) for ``spec``."""
    if spec.backend == "toy":
        return ToyImageBackend(spec), ToyTextBackend(spec)
    clip = OpenClipBackend(spec)
    return clip, clip


def frozen_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def to_batch(images, spec: BackboneSpec, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 image(s) in [0, 1] -> (B, 3, H, W) tensor resized to ``spec.input_size``."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 images, got shape {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)
    if tuple(x.shape[-2:]) != tuple(spec.input_size):
        x = F.interpolate(x, size=tuple(spec.input_size), mode="bilinear", align_corners=False, antialias=True)
    return x.clamp(0.0, 1.0)
