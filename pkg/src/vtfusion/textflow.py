"""Prompt construction and the text-guided prediction map."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

from .backbone import MultiLevelFeatures, ShapeError

NORMAL_TEMPLATE = "a photo of a normal {}"
ABNORMAL_TEMPLATE = "a photo of a damaged {}"
DEFAULT_TEMPERATURE = 100.0


class PromptPair(NamedTuple):
    normal_prompt: str
    abnormal_prompt: str
    object_label: str

    @property
    def prompts(self) -> tuple[str, str]:
        return (self.normal_prompt, self.abnormal_prompt)


def build_prompts(object_label: str) -> PromptPair:
    if not object_label or not object_label.strip():
        raise ValueError("object label must be non-empty")
    return PromptPair(NORMAL_TEMPLATE.format(object_label), ABNORMAL_TEMPLATE.format(object_label), object_label)


def level_probabilities(features, text: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE):
    """Per-level softmax over (normal, abnormal) of scaled cosine similarity.

    Returns a list of ``(..., h, w, 2)`` tensors.
    """
    levels = features.per_level if isinstance(features, MultiLevelFeatures) else list(features)
    if text.ndim != 2 or text.shape[0] != 2:
        raise ShapeError(f"text embedding must be 2 x c, got {tuple(text.shape)}")
    out = []
    for f in levels:
        if f.shape[-1] != text.shape[-1]:
            raise ShapeError(f"feature channels {f.shape[-1]} != text dim {text.shape[-1]}")
        logits = temperature * F.normalize(f, dim=-1) @ text.to(f.dtype).T
        out.append(torch.softmax(logits, dim=-1))
    return out


def text_prediction(features, text: torch.Tensor, temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Sum over levels of the abnormal-class probability; values lie in [0, L]."""
    probs = level_probabilities(features, text, temperature)
    return torch.stack([p[..., 1] for p in probs]).sum(0)
