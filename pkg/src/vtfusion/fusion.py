"""Prediction fusion: per-map spatial self-attention, a residual fusion block,
and an FPN-style segmentation head that produces the final anomaly map.

Maps are handled as ``(B, h, w)`` tensors at the API boundary and as
``(B, C, h, w)`` internally.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class FusionParams:
    attn_embed_dim: int = 8
    residual_channels: int = 8
    seg_width: int = 16
    seg_scales: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if self.attn_embed_dim <= 0 or self.residual_channels <= 0 or self.seg_width <= 0:
            raise ConfigError("fusion widths must be positive")
        scales = tuple(self.seg_scales)
        if not scales or list(scales) != sorted(scales) or len(set(scales)) != len(scales):
            raise ConfigError("seg_scales must be strictly ascending")
        if any(s < 1 or s & (s - 1) for s in scales):
            raise ConfigError("seg_scales must be powers of two")

    def to_dict(self):
        return asdict(self)


class SpatialSelfAttention(nn.Module):
    """Single-head attention with pixels as tokens, no positional encoding.

    The map is lifted to ``dim`` channels, attended, projected back and added to
    the input. The output projection starts at zero, so the module is the
    identity at initialization.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.lift = nn.Linear(1, dim)
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.out = nn.Linear(dim, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.scale = dim**-0.5

    def forward(self, m):  # (B, h, w)
        b, h, w = m.shape
        tokens = self.lift(m.reshape(b, h * w, 1))
        attn = torch.softmax(self.q(tokens) @ self.k(tokens).transpose(1, 2) * self.scale, dim=-1)
        return m + self.out(attn @ self.v(tokens)).reshape(b, h, w)


class ResidualFusionBlock(nn.Module):
    """conv-BN-ReLU-conv-BN with identity skip, then a 1x1 mix to one channel.

    The second BN starts with zero scale and the mix with equal weights, so at
    initialization the block returns the channel mean of its (non-negative) input.
    """

    def __init__(self, in_ch: int, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, width, 3, padding=1, padding_mode="replicate", bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, in_ch, 3, padding=1, padding_mode="replicate", bias=False)
        self.bn2 = nn.BatchNorm2d(in_ch)
        self.mix = nn.Conv2d(in_ch, 1, 1)
        nn.init.zeros_(self.bn2.weight)
        with torch.no_grad():
            self.mix.weight.fill_(1.0 / in_ch)
            self.mix.bias.zero_()

    def forward(self, x):
        branch = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return self.mix(F.relu(x + branch))


class FusionBlock(nn.Module):
    def __init__(self, params: FusionParams):
        super().__init__()
        self.sam_vision = SpatialSelfAttention(params.attn_embed_dim)
        self.sam_text = SpatialSelfAttention(params.attn_embed_dim)
        self.block = ResidualFusionBlock(2, params.residual_channels)

    def forward(self, m_v, m_t):
        x = torch.stack([self.sam_vision(m_v), self.sam_text(m_t)], dim=1)
        return self.block(x)[:, 0]


class SegmentationNet(nn.Module):
    """Three-channel input -> pooled pyramid -> top-down merge -> 1-channel logits.

    A 1x1 shortcut from the normalized input to the logits starts out passing the
    fused channel straight through while the pyramid head starts at zero, so an
    untrained head already ranks pixels by the fused map.
    """

    def __init__(self, params: FusionParams, in_ch: int = 3):
        super().__init__()
        width = params.seg_width
        self.scales = tuple(params.seg_scales)
        self.input_norm = nn.BatchNorm2d(in_ch)
        self.lateral = nn.ModuleList(
            nn.Conv2d(in_ch, width, 3, padding=1, padding_mode="replicate") for _ in self.scales
        )
        self.smooth = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1, padding_mode="replicate") for _ in self.scales[:-1]
        )
        self.head = nn.Conv2d(width, 1, 1)
        self.shortcut = nn.Conv2d(in_ch, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        with torch.no_grad():
            self.shortcut.weight.zero_()
            self.shortcut.weight[0, in_ch - 1] = 1.0
            self.shortcut.bias.zero_()

    def forward(self, x):
        x = self.input_norm(x)
        feats = []
        for s, lat in zip(self.scales, self.lateral):
            xs = F.avg_pool2d(x, s, ceil_mode=True) if s > 1 else x
            feats.append(F.relu(lat(xs)))
        y = feats[-1]
        for f, smooth in zip(reversed(feats[:-1]), reversed(self.smooth)):
            y = f + F.interpolate(y, size=f.shape[-2:], mode="bilinear", align_corners=False)
            y = F.relu(smooth(y))
        return self.head(y) + self.shortcut(x)


def _check_maps(*maps):
    shape = maps[0].shape
    if maps[0].ndim != 3:
        raise ValueError(f"prediction maps must be (B, h, w), got {tuple(shape)}")
    for m in maps[1:]:
        if m.shape != shape:
            raise ValueError(f"prediction map shape mismatch: {tuple(shape)} vs {tuple(m.shape)}")


def fuse(m_v, m_t, block: FusionBlock):
    """Fused visual-text map, same (B, h, w) shape as the inputs."""
    _check_maps(m_v, m_t)
    return block(m_v, m_t)


def average_fuse(m_v, m_t):
    """Ablation baseline: plain averaging instead of the learned fusion block."""
    _check_maps(m_v, m_t)
    return 0.5 * (m_v + m_t)


def segment(m_v, m_t, m_vt, net: SegmentationNet, out_size) -> torch.Tensor:
    """Final anomaly map in [0, 1] at ``out_size`` = (H, W)."""
    _check_maps(m_v, m_t, m_vt)
    logits = net(torch.stack([m_v, m_t, m_vt], dim=1))
    up = F.interpolate(logits, size=tuple(out_size), mode="bilinear", align_corners=False)
    return torch.sigmoid(up)[:, 0]


def image_score(m_f):
    """Image-level score: the maximum pixel of the final map (per image for batches)."""
    if isinstance(m_f, torch.Tensor):
        if m_f.numel() == 0:
            raise ValueError("empty map")
        return m_f.flatten(-2).amax(-1) if m_f.ndim == 3 else m_f.max()
    m_f = np.asarray(m_f)
    if m_f.size == 0:
        raise ValueError("empty map")
    return m_f.reshape(m_f.shape[0], -1).max(-1) if m_f.ndim == 3 else m_f.max()
