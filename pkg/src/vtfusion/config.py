"""Run configuration: built-in defaults < YAML config file < command-line overrides.

File schema (every section and key optional; unknown keys are errors)::

    backbone:   # BackboneSpec fields
      backend: toy
      levels: [0, 1, 2, 3]
      ...
    train:      # TrainConfig fields
      k_shots: 2
      iterations: 1000
      lr_aie: 1.0e-3
      loss:   {r: 1.0e-5, alpha: 0.1, lam: 1.0}
      synth:  {anomaly_type: mix, region_area_fraction: [0.01, 0.06], ...}
      fusion: {attn_embed_dim: 8, seg_scales: [1, 2, 4], ...}
    data:
      root: path/to/mvtec
      category: bottle
      object_label: bottle     # defaults to the category name
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import _dc
from .backbone import BackboneSpec
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    category: str | None = None
    object_label: str | None = None


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _deep_update(base: dict, upd: dict, where=""):
    for key, value in upd.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value, f"{where}{key}.")
        else:
            base[key] = value
    return base


def _set_dotted(d: dict, dotted: str, value):
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        nxt = cur.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {dotted}: {p} is not a section")
        cur = nxt
    cur[parts[-1]] = value


def parse_set_option(option: str):
    """``key.path=value`` with the value parsed as YAML."""
    if "=" not in option:
        raise ConfigError(f"override {option!r} must look like key.path=value")
    key, raw = option.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve(config_path=None, overrides: dict | None = None) -> tuple[RunConfig, dict]:
    """Merge defaults, file and overrides; returns the validated config and its provenance."""
    merged = _dc.to_dict(RunConfig())
    if config_path is not None:
        _deep_update(merged, read_config_file(config_path))
    cli = {}
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(cli, dotted, value)
    _deep_update(merged, copy.deepcopy(cli))
    data = merged.get("data") or {}
    train = merged.get("train") or {}
    if isinstance(data, dict) and isinstance(train, dict):
        # the dataset category and prompt label flow into the training config
        category = data.get("category")
        if category:
            train["category"] = category
        if data.get("object_label"):
            train["object_label"] = data["object_label"]
        elif category and train.get("object_label") == TrainConfig.object_label:
            train["object_label"] = category.replace("_", " ")
    cfg = _dc.from_dict(RunConfig, merged)
    provenance = {"config_file": str(config_path) if config_path else None, "overrides": cli}
    return cfg, provenance


def dump(cfg: RunConfig, provenance: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config": _dc.to_dict(cfg), "provenance": provenance}
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return path
