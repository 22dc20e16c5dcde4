"""Run configuration: one validated, JSON-round-trippable document that is
echoed verbatim into every output artifact.

The file format is plain JSON with nested sections mirroring the dataclass
layout below; unknown keys are rejected so typos fail loudly. ``SOWA_SEED``
in the environment supplies the seed when neither the file nor the command
line does.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from .backbone import BackboneConfig
from .errors import ConfigError
from .fusion import FusionConfig

SEED_ENV_VAR = "SOWA_SEED"

ADAPTER_KINDS = ("fwa", "linear")
ATTENTION_MODES = ("vv", "qkv")
PROMPT_KINDS = ("coop", "template", "fixed_pair")
IMAGE_SCORE_MODES = ("cls", "max_map")


@dataclass(frozen=True)
class BackboneSection:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 64
    blocks_per_stage: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    norm_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: Tuple[float, float, float] = (0.25, 0.25, 0.25)


@dataclass(frozen=True)
class LossSection:
    dice: float = 1.0
    focal: float = 1.0
    bce: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    dice_eps: float = 1.0

    def validate(self) -> "LossSection":
        if min(self.dice, self.focal, self.bce) < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.focal_gamma < 0 or not 0 <= self.focal_alpha <= 1:
            raise ConfigError("need focal_gamma >= 0 and focal_alpha in [0, 1]")
        if self.dice_eps <= 0:
            raise ConfigError("dice_eps must be > 0")
        return self


@dataclass(frozen=True)
class OptimSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 1

    def validate(self) -> "OptimSection":
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        return self


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    adapter_kind: str = "fwa"
    attention_mode: str = "vv"
    window: int = 4
    prompt_kind: str = "coop"
    prompt_length: int = 12
    c_text: int = 32
    text_width: int = 32
    image_score_mode: str = "max_map"
    few_shot_beta: float = 0.5
    backbone: BackboneSection = field(default_factory=BackboneSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)

    def validate(self) -> "RunConfig":
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter_kind must be one of {ADAPTER_KINDS}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.prompt_kind not in PROMPT_KINDS:
            raise ConfigError(f"prompt_kind must be one of {PROMPT_KINDS}")
        if self.image_score_mode not in IMAGE_SCORE_MODES:
            raise ConfigError(f"image_score_mode must be one of {IMAGE_SCORE_MODES}")
        if self.prompt_length < 1:
            raise ConfigError("prompt_length must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.c_text < 2 or self.text_width < 2:
            raise ConfigError("c_text and text_width must be >= 2")
        if not 0.0 <= self.few_shot_beta <= 1.0:
            raise ConfigError("few_shot_beta must lie in [0, 1]")
        self.backbone_config()  # validates the backbone section
        self.fusion.validate()
        self.loss.validate()
        self.optim.validate()
        return self

    def backbone_config(self) -> BackboneConfig:
        b = self.backbone
        return BackboneConfig(
            image_size=b.image_size,
            patch_size=b.patch_size,
            channels=b.channels,
            blocks_per_stage=b.blocks_per_stage,
            heads=b.heads,
            mlp_ratio=b.mlp_ratio,
            seed=self.seed,
            norm_mean=tuple(b.norm_mean),
            norm_std=tuple(b.norm_std),
        ).validate()

    def to_dict(self) -> Dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj):
                return {k: convert(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return convert(self)


_SECTION_TYPES = {
    "backbone": BackboneSection,
    "fusion": FusionConfig,
    "loss": LossSection,
    "optim": OptimSection,
}


def _build_section(cls, data: Dict, context: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {context}")
    kwargs = {}
    for name, value in data.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {context} section: {exc}") from exc


def config_from_dict(data: Dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config document must be an object, got {type(data).__name__}")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top_fields)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    kwargs = {}
    for name, value in data.items():
        if name in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {name!r} must be an object")
            kwargs[name] = _build_section(_SECTION_TYPES[name], value, name)
        else:
            kwargs[name] = value
    try:
        return RunConfig(**kwargs).validate()
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from exc


def load_config(path, overrides: Optional[Dict] = None) -> RunConfig:
    """Read a JSON config file, apply flat overrides, validate."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if overrides:
        data.update(overrides)
    return config_from_dict(data)


def default_config(seed: Optional[int] = None, **overrides) -> RunConfig:
    """Defaults plus keyword overrides; seed falls back to SOWA_SEED, then 0."""
    if seed is None:
        env = os.environ.get(SEED_ENV_VAR)
        seed = int(env) if env else 0
    data = {"seed": seed}
    data.update(overrides)
    return config_from_dict(data)


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
