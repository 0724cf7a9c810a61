"""Run configuration: a flat dotted-key schema serialized as JSON.

Unknown keys are rejected by name so typos fail loudly. The full config is
copied verbatim into every output directory for provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

CONFIG_VERSION = 1


class ConfigKeyError(ValueError):
    pass


def _int(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise TypeError(f"expected integer, got {v!r}")
    return int(v)


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError(f"expected number, got {v!r}")
    return float(v)


def _str(v):
    if not isinstance(v, str):
        raise TypeError(f"expected string, got {v!r}")
    return v


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError(f"expected boolean, got {v!r}")
    return v


def _int_list(n):
    def cast(v):
        if not isinstance(v, (list, tuple)) or (n and len(v) != n):
            raise TypeError(f"expected list of {n} integers, got {v!r}")
        return tuple(_int(x) for x in v)

    return cast

def _float_list(n):
    def cast(v):
        if not isinstance(v, (list, tuple)) or (n and len(v) != n):
            raise TypeError(f"expected list of {n} numbers, got {v!r}")
        return tuple(_float(x) for x in v)

    return cast


def _str_list(v):
    if not isinstance(v, (list, tuple)) or not all(isinstance(x, str) for x in v):
        raise TypeError(f"expected list of strings, got {v!r}")
    return tuple(v)


def _choice(*options):
    def cast(v):
        if v not in options:
            raise TypeError(f"expected one of {options}, got {v!r}")
        return v

    return cast


def _optional(cast):
    return lambda v: None if v is None else cast(v)


ENCODER_VARIANTS = ("hybrid", "hybrid-light", "plain", "rt")
DEPTH_VARIANTS = ("E", "A")
POS_EMBED_VARIANTS = ("3d-sincos", "2d-sincos", "meter-wise", "k-bin")
QUERY_STRATEGIES = ("l-center", "l-center+enc-box", "enc-center", "enc-center+enc-box")

# key -> (default, caster)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "config_version": (CONFIG_VERSION, _int),
    "seed": (0, _int),
    "model.dim": (48, _int),
    "model.classes": (("Car",), _str_list),
    "backbone.width": (1.0, _float),
    "encoder.variant": ("hybrid", _choice(*ENCODER_VARIANTS)),
    "encoder.ffn_dim": (96, _int),
    "encoder.heads": (8, _int),
    "depth.variant": ("E", _choice(*DEPTH_VARIANTS)),
    "depth.k": (12, _int),
    "depth.range": ((1.0, 60.0), _float_list(2)),
    "depth.sdc_counts": ((2, 2, 4), _int_list(3)),
    "depth.width": (1.0, _float),
    "depth.pos_embed": ("3d-sincos", _choice(*POS_EMBED_VARIANTS)),
    "depth.sdc_pointwise": (False, _bool),
    "depth.rgfi_pointwise": (False, _bool),
    "queries.count": (50, _int),
    "queries.strategy": ("enc-center+enc-box", _choice(*QUERY_STRATEGIES)),
    "decoder.layers": (3, _int),
    "decoder.ffn_dim": (96, _int),
    "decoder.pos_embed": (None, _optional(_choice(*POS_EMBED_VARIANTS))),
    "train.lr": (2e-4, _float),
    "train.weight_decay": (1e-4, _float),
    "train.betas": ((0.9, 0.999), _float_list(2)),
    "train.epochs": (10, _int),
    "train.batch_size": (8, _int),
    "train.milestones": ((), _int_list(0)),
    "train.lambda_cls": (2.0, _float),
    "train.lambda_l1": (5.0, _float),
    "train.lambda_giou": (2.0, _float),
    "train.lambda_dmap_e": (0.5, _float),
    "train.lambda_dmap_a": (1.0, _float),
    "train.flip": (False, _bool),
    "train.checkpoint_every": (0, _int),  # 0 = only final
    "data.source": ("synthetic", _choice("synthetic", "kitti-dir")),
    "data.dir": (None, _optional(_str)),
    "data.scenes": (16, _int),
    "data.image_size": ((128, 128), _int_list(2)),
    "data.max_objects": (5, _int),
    "data.depth_range": ((4.0, 40.0), _float_list(2)),
    "data.categories": (("Car",), _str_list),
    "eval.iou_thresholds": (None, _optional(_float_list(0))),
}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (default, _) in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise ConfigKeyError(f"unknown config key {key!r}")
            _, cast = SCHEMA[key]
            try:
                merged[key] = cast(value)
            except TypeError as exc:
                raise ConfigKeyError(f"config key {key!r}: {exc}") from None
        if merged["config_version"] != CONFIG_VERSION:
            raise ConfigKeyError(
                f"config_version {merged['config_version']} unsupported (expected {CONFIG_VERSION})"
            )
        self.values = merged

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigKeyError(f"unknown config key {key!r}")
        return self.values[key]

    def with_overrides(self, **flat: Any) -> "RunConfig":
        """New config with dotted keys replaced (underscores become dots)."""
        merged = dict(self.values)
        for key, value in flat.items():
            merged[key.replace("__", ".")] = value
        return RunConfig(merged)

    def updated(self, overrides: dict[str, Any]) -> "RunConfig":
        merged = dict(self.values)
        merged.update(overrides)
        return RunConfig(merged)

    @property
    def decoder_pos_embed(self) -> str:
        return self["decoder.pos_embed"] or self["depth.pos_embed"]

    def to_json(self) -> str:
        def normalize(v):
            return list(v) if isinstance(v, tuple) else v

        return json.dumps({k: normalize(v) for k, v in sorted(self.values.items())}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ConfigKeyError("config file must hold a JSON object of dotted keys")
        return cls(raw)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def default_config(**overrides) -> RunConfig:
    return RunConfig({}).updated(overrides)
