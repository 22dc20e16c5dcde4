"""Frozen vision-transformer feature extractor.

A seeded, desk-scale stand-in for a large pretrained visual encoder: standard
pre-norm blocks with QKV attention, a class token carried through the whole
stack, and four stage outputs (the patch tokens after the last block of each
quarter of the stack). Attention projections are bias-free so a stage's
(W_q, W_k, W_v, W_o) quadruple can be handed to the adapters as-is.

All weights are created once and marked read-only; nothing in this module is
trainable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import numerics
from .archive import archive_read, archive_write
from .errors import ConfigError, UsageError, WeightsError

_CONFIG_KEYS = (
    "image_size",
    "patch_size",
    "channels",
    "blocks_per_stage",
    "heads",
    "mlp_ratio",
)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 64
    stages: int = 4
    blocks_per_stage: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0
    norm_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    norm_std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    def validate(self) -> "BackboneConfig":
        if self.stages != 4:
            raise ConfigError(f"backbone is fixed at 4 stages, got {self.stages}")
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def total_blocks(self) -> int:
        return self.stages * self.blocks_per_stage


@dataclass
class StageFeatures:
    """Patch-token features after each stage, plus the final class token."""

    stages: List[np.ndarray]  # 4 arrays of shape (L, C)
    class_token: np.ndarray  # (C,)
    grid: Tuple[int, int]


@dataclass(frozen=True)
class AttentionWeights:
    """Frozen projection matrices of one backbone block."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int
    stage: int


@dataclass
class Backbone:
    config: BackboneConfig
    weights: Dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        for arr in self.weights.values():
            arr.setflags(write=False)

    def tensor_names(self) -> List[str]:
        return sorted(self.weights.keys())

    def hashes(self) -> Dict[str, str]:
        return {name: tensor_hash(arr) for name, arr in sorted(self.weights.items())}

    def content_hash(self) -> str:
        joined = "\n".join(f"{n}:{h}" for n, h in self.hashes().items())
        return hashlib.sha256(joined.encode()).hexdigest()

    def stage_attention_weights(self, stage: int) -> AttentionWeights:
        """(W_q, W_k, W_v, W_o) of the last block of ``stage`` (1-based)."""
        if stage not in (1, 2, 3, 4):
            raise UsageError(f"stage must be in 1..4, got {stage}")
        block = stage * self.config.blocks_per_stage - 1
        w = self.weights
        return AttentionWeights(
            w_q=w[f"blocks.{block}.attn.w_q"],
            w_k=w[f"blocks.{block}.attn.w_k"],
            w_v=w[f"blocks.{block}.attn.w_v"],
            w_o=w[f"blocks.{block}.attn.w_o"],
            heads=self.config.heads,
            stage=stage,
        )

    def normalize_image(self, image: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.config.norm_mean, dtype=image.dtype)
        std = np.asarray(self.config.norm_std, dtype=image.dtype)
        return (image - mean) / std

    def forward(self, image: np.ndarray, pre_normalized: bool = False) -> StageFeatures:
        """Run the frozen stack on one (image_size, image_size, 3) image."""
        cfg = self.config
        image = np.asarray(image, dtype=numerics.default_dtype())
        expected = (cfg.image_size, cfg.image_size, 3)
        if image.shape != expected:
            raise UsageError(f"expected image of shape {expected}, got {image.shape}")
        if not pre_normalized:
            image = self.normalize_image(image)

        x = self._embed(image)
        stage_outputs: List[np.ndarray] = []
        for block in range(cfg.total_blocks):
            x = self._block(x, block)
            if (block + 1) % cfg.blocks_per_stage == 0:
                stage_outputs.append(x[1:].copy())
        return StageFeatures(
            stages=stage_outputs,
            class_token=x[0].copy(),
            grid=(cfg.grid, cfg.grid),
        )

    def forward_batch(self, images) -> List[StageFeatures]:
        return [self.forward(img) for img in images]

    def _embed(self, image: np.ndarray) -> np.ndarray:
        cfg = self.config
        g, p = cfg.grid, cfg.patch_size
        patches = image.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4)
        patches = patches.reshape(cfg.tokens, p * p * 3)
        tokens = patches @ self.weights["patch_embed.weight"] + self.weights["patch_embed.bias"]
        x = np.concatenate([self.weights["cls_token"][None, :], tokens], axis=0)
        return x + self.weights["pos_embed"]

    def _block(self, x: np.ndarray, idx: int) -> np.ndarray:
        w = self.weights
        pre = f"blocks.{idx}"
        h = _layer_norm(x, w[f"{pre}.ln1.scale"], w[f"{pre}.ln1.offset"])
        x = x + self._attention(h, idx)
        h = _layer_norm(x, w[f"{pre}.ln2.scale"], w[f"{pre}.ln2.offset"])
        x = x + self._mlp(h, idx)
        return x

    def _attention(self, x: np.ndarray, idx: int) -> np.ndarray:
        cfg = self.config
        w = self.weights
        pre = f"blocks.{idx}.attn"
        n, c = x.shape
        dh = c // cfg.heads
        q = (x @ w[f"{pre}.w_q"]).reshape(n, cfg.heads, dh)
        k = (x @ w[f"{pre}.w_k"]).reshape(n, cfg.heads, dh)
        v = (x @ w[f"{pre}.w_v"]).reshape(n, cfg.heads, dh)
        scores = np.einsum("ihd,jhd->hij", q, k) / np.sqrt(dh)
        attn = numerics.softmax(scores, axis=-1)
        ctx = np.einsum("hij,jhd->ihd", attn, v).reshape(n, c)
        return ctx @ w[f"{pre}.w_o"]

    def _mlp(self, x: np.ndarray, idx: int) -> np.ndarray:
        w = self.weights
        pre = f"blocks.{idx}.mlp"
        h = x @ w[f"{pre}.w1"] + w[f"{pre}.b1"]
        h = _gelu(h)
        return h @ w[f"{pre}.w2"] + w[f"{pre}.b2"]


def _layer_norm(x: np.ndarray, scale: np.ndarray, offset: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * scale + offset


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def tensor_hash(arr: np.ndarray) -> str:
    arr = np.ascontiguousarray(arr)
    digest = hashlib.sha256()
    digest.update(str(arr.dtype).encode())
    digest.update(json.dumps(arr.shape).encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


def _expected_shapes(cfg: BackboneConfig) -> Dict[str, Tuple[int, ...]]:
    c = cfg.channels
    hidden = int(round(cfg.mlp_ratio * c))
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_size * cfg.patch_size * 3, c),
        "patch_embed.bias": (c,),
        "pos_embed": (cfg.tokens + 1, c),
        "cls_token": (c,),
    }
    for b in range(cfg.total_blocks):
        pre = f"blocks.{b}"
        shapes[f"{pre}.ln1.scale"] = (c,)
        shapes[f"{pre}.ln1.offset"] = (c,)
        shapes[f"{pre}.attn.w_q"] = (c, c)
        shapes[f"{pre}.attn.w_k"] = (c, c)
        shapes[f"{pre}.attn.w_v"] = (c, c)
        shapes[f"{pre}.attn.w_o"] = (c, c)
        shapes[f"{pre}.ln2.scale"] = (c,)
        shapes[f"{pre}.ln2.offset"] = (c,)
        shapes[f"{pre}.mlp.w1"] = (c, hidden)
        shapes[f"{pre}.mlp.b1"] = (hidden,)
        shapes[f"{pre}.mlp.w2"] = (hidden, c)
        shapes[f"{pre}.mlp.b2"] = (c,)
    return shapes


def init_synthetic(config: BackboneConfig, seed: int | None = None) -> Backbone:
    """Build a backbone with deterministic seeded weights.

    Matrices are Gaussian with std 1/sqrt(fan_in), embeddings Gaussian with
    std 0.02, norms at identity, biases at zero. Equal seeds give bit-identical
    weights.
    """
    cfg = config.validate()
    if seed is None:
        seed = cfg.seed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dtype = numerics.default_dtype()
    weights: Dict[str, np.ndarray] = {}
    for name, shape in _expected_shapes(cfg).items():
        short = name.rsplit(".", 1)[-1]
        if short in ("scale",):
            arr = np.ones(shape)
        elif short in ("offset", "bias", "b1", "b2"):
            arr = np.zeros(shape)
        elif name in ("pos_embed", "cls_token"):
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        weights[name] = arr.astype(dtype)
    return Backbone(config=cfg, weights=weights)


def save_weights(backbone: Backbone, path) -> None:
    """Write weights plus the config scalars needed to rebuild the model."""
    cfg = backbone.config
    tensors = dict(backbone.weights)
    for key in _CONFIG_KEYS:
        tensors[f"config.{key}"] = np.asarray([float(getattr(cfg, key))])
    tensors["config.norm_mean"] = np.asarray(cfg.norm_mean)
    tensors["config.norm_std"] = np.asarray(cfg.norm_std)
    archive_write(path, tensors)


def load_weights(path) -> Backbone:
    """Rebuild a backbone from a self-describing weight archive."""
    tensors = archive_read(path)
    try:
        kwargs = {key: tensors.pop(f"config.{key}") for key in _CONFIG_KEYS}
    except KeyError as exc:
        raise WeightsError(f"archive missing config entry: {exc}") from exc
    cfg = BackboneConfig(
        image_size=int(kwargs["image_size"][0]),
        patch_size=int(kwargs["patch_size"][0]),
        channels=int(kwargs["channels"][0]),
        blocks_per_stage=int(kwargs["blocks_per_stage"][0]),
        heads=int(kwargs["heads"][0]),
        mlp_ratio=float(kwargs["mlp_ratio"][0]),
        norm_mean=tuple(float(v) for v in tensors.pop("config.norm_mean")),
        norm_std=tuple(float(v) for v in tensors.pop("config.norm_std")),
    ).validate()

    expected = _expected_shapes(cfg)
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise WeightsError(f"archive missing tensor {missing[0]!r}")
    unknown = sorted(set(tensors) - set(expected))
    if unknown:
        raise WeightsError(f"archive has unknown tensor {unknown[0]!r}")
    weights = {}
    for name, shape in expected.items():
        arr = tensors[name]
        if arr.shape != shape:
            raise WeightsError(
                f"tensor {name!r} has shape {arr.shape}, expected {shape}"
            )
        weights[name] = arr.astype(numerics.default_dtype())
    return Backbone(config=cfg, weights=weights)
