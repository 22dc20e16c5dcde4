"""Dual learnable prompts and the frozen text-encoding path.

Two context sequences (normal / abnormal) are trainable; everything else is
frozen: a small seeded vocabulary of anchor embeddings, a two-block
transformer encoder, and the projection into the shared text feature space.
Each branch is encoded independently as

    [context_1 .. context_l, <branch anchor>, "object"]

and the last token's projected, unit-normalized embedding becomes that
branch's row of the 2 x C_text feature matrix (row 0 normal, row 1 abnormal,
always in that order).

There is no tokenizer: "tokens" are vocabulary IDs with fixed embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import autodiff as ag
from . import numerics
from .errors import ConfigError, UsageError

VOCABULARY = (
    "a",
    "an",
    "photo",
    "of",
    "the",
    "normal",
    "abnormal",
    "object",
    "surface",
    "texture",
    "flawless",
    "damaged",
)

TEMPLATE_SENTENCES = {
    "normal": ("a", "photo", "of", "a", "normal", "object"),
    "abnormal": ("a", "photo", "of", "an", "abnormal", "object"),
}

PROMPT_KINDS = ("coop", "template", "fixed_pair")

DEFAULT_CONTEXT_LENGTH = 12


@dataclass(frozen=True)
class TextEncoderConfig:
    width: int = 32
    heads: int = 4
    blocks: int = 2
    mlp_ratio: float = 4.0
    max_len: int = 32
    c_text: int = 32
    seed: int = 1

    def validate(self) -> "TextEncoderConfig":
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.blocks < 1 or self.max_len < 3:
            raise ConfigError("text encoder needs >= 1 block and max_len >= 3")
        return self


@dataclass
class FrozenTextEncoder:
    config: TextEncoderConfig
    weights: Dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        for arr in self.weights.values():
            arr.setflags(write=False)

    def hashes(self) -> Dict[str, str]:
        from .backbone import tensor_hash

        return {n: tensor_hash(a) for n, a in sorted(self.weights.items())}

    def token_embedding(self, word: str) -> np.ndarray:
        if word not in VOCABULARY:
            raise UsageError(f"unknown vocabulary word {word!r}")
        return self.weights["embed_table"][VOCABULARY.index(word)]

    def encode_sequence(self, vectors):
        """Encode a (n, width) embedding sequence to one unit-norm C_text row.

        Accepts an autodiff Var (gradients flow to the input sequence only;
        encoder weights are constants) or a plain array.
        """
        n = vectors.shape[0]
        if n > self.config.max_len:
            raise UsageError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        x = ag.add(vectors, self.weights["pos_embed"][:n])
        for b in range(self.config.blocks):
            x = self._block(x, b)
        last = x[n - 1]
        projected = ag.matmul(last, self.weights["text_proj"])
        return ag.l2_normalize_rows(projected)

    def _block(self, x, idx: int):
        w = self.weights
        pre = f"blocks.{idx}"
        h = ag.layer_norm(x, w[f"{pre}.ln1.scale"], w[f"{pre}.ln1.offset"])
        x = ag.add(x, self._attention(h, idx))
        h = ag.layer_norm(x, w[f"{pre}.ln2.scale"], w[f"{pre}.ln2.offset"])
        return ag.add(x, self._mlp(h, idx))

    def _attention(self, x, idx: int):
        cfg = self.config
        w = self.weights
        pre = f"blocks.{idx}.attn"
        n = x.shape[0]
        heads, dh = cfg.heads, cfg.width // cfg.heads

        def split(t):  # (n, width) -> (heads, n, dh)
            return ag.transpose(ag.reshape(t, (n, heads, dh)), (1, 0, 2))

        q = split(ag.matmul(x, w[f"{pre}.w_q"]))
        k = split(ag.matmul(x, w[f"{pre}.w_k"]))
        v = split(ag.matmul(x, w[f"{pre}.w_v"]))
        scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        ctx = ag.matmul(ag.softmax_last(scores), v)
        merged = ag.reshape(ag.transpose(ctx, (1, 0, 2)), (n, cfg.width))
        return ag.matmul(merged, w[f"{pre}.w_o"])

    def _mlp(self, x, idx: int):
        w = self.weights
        pre = f"blocks.{idx}.mlp"
        h = ag.gelu(ag.add(ag.matmul(x, w[f"{pre}.w1"]), w[f"{pre}.b1"]))
        return ag.add(ag.matmul(h, w[f"{pre}.w2"]), w[f"{pre}.b2"])


def build_text_encoder(config: TextEncoderConfig | None = None) -> FrozenTextEncoder:
    cfg = (config or TextEncoderConfig()).validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    dtype = numerics.default_dtype()
    width = cfg.width
    hidden = int(round(cfg.mlp_ratio * width))
    weights: Dict[str, np.ndarray] = {
        "embed_table": rng.normal(0.0, 0.02, size=(len(VOCABULARY), width)),
        "pos_embed": rng.normal(0.0, 0.02, size=(cfg.max_len, width)),
        "text_proj": rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, cfg.c_text)),
    }
    for b in range(cfg.blocks):
        pre = f"blocks.{b}"
        weights[f"{pre}.ln1.scale"] = np.ones(width)
        weights[f"{pre}.ln1.offset"] = np.zeros(width)
        for mat in ("w_q", "w_k", "w_v", "w_o"):
            weights[f"{pre}.attn.{mat}"] = rng.normal(
                0.0, 1.0 / np.sqrt(width), size=(width, width)
            )
        weights[f"{pre}.ln2.scale"] = np.ones(width)
        weights[f"{pre}.ln2.offset"] = np.zeros(width)
        weights[f"{pre}.mlp.w1"] = rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, hidden))
        weights[f"{pre}.mlp.b1"] = np.zeros(hidden)
        weights[f"{pre}.mlp.w2"] = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, width))
        weights[f"{pre}.mlp.b2"] = np.zeros(width)
    weights = {k: v.astype(dtype) for k, v in weights.items()}
    return FrozenTextEncoder(config=cfg, weights=weights)


@dataclass
class PromptPair:
    """Trainable normal/abnormal context vectors plus frozen anchor embeddings."""

    normal_context: ag.Var  # (l, width)
    abnormal_context: ag.Var  # (l, width)
    anchors: Dict[str, np.ndarray]
    length: int


@dataclass
class TextFeatures:
    """2 x C_text matrix; row 0 is the normal branch, row 1 the abnormal one."""

    features: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        return self.features[0]

    @property
    def abnormal(self) -> np.ndarray:
        return self.features[1]


def build_prompt_pair(length: int, seed: int, encoder: FrozenTextEncoder) -> PromptPair:
    """Seeded Gaussian(0, 0.02) contexts of ``length`` vectors per branch."""
    if length < 1:
        raise UsageError(f"context length must be >= 1, got {length}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dtype = numerics.default_dtype()
    width = encoder.config.width
    normal = rng.normal(0.0, 0.02, size=(length, width)).astype(dtype)
    abnormal = rng.normal(0.0, 0.02, size=(length, width)).astype(dtype)
    anchors = {
        word: encoder.token_embedding(word).copy()
        for word in ("normal", "abnormal", "object")
    }
    return PromptPair(
        normal_context=ag.Var(normal, requires_grad=True),
        abnormal_context=ag.Var(abnormal, requires_grad=True),
        anchors=anchors,
        length=length,
    )


def encode_branch(pair: PromptPair, encoder: FrozenTextEncoder, branch: str):
    """Encode one branch; returns a Var when its context requires gradients."""
    if branch not in ("normal", "abnormal"):
        raise UsageError(f"branch must be 'normal' or 'abnormal', got {branch!r}")
    context = pair.normal_context if branch == "normal" else pair.abnormal_context
    tail = np.stack([pair.anchors[branch], pair.anchors["object"]])
    sequence = ag.concat([context, tail.astype(context.data.dtype)], axis=0)
    return encoder.encode_sequence(sequence)


def encode_prompts(pair: PromptPair, encoder: FrozenTextEncoder):
    """Both branches stacked to (2, C_text); Var when contexts are trainable."""
    rows = [encode_branch(pair, encoder, "normal"), encode_branch(pair, encoder, "abnormal")]
    if any(ag.is_var(r) for r in rows):
        return ag.concat([ag.reshape(r, (1, -1)) for r in rows], axis=0)
    return np.stack(rows)


def encode_text(pair: PromptPair, encoder: FrozenTextEncoder) -> TextFeatures:
    """Snapshot of the prompt features as plain arrays (inference view)."""
    out = encode_prompts(pair, encoder)
    return TextFeatures(features=out.data if ag.is_var(out) else np.asarray(out))


def fixed_template_features(
    encoder: FrozenTextEncoder, kind: str, pair: PromptPair | None = None
) -> TextFeatures:
    """Non-trainable text features for the ablations.

    kind='template' encodes the two hand-written vocabulary sentences;
    kind='fixed_pair' encodes the learnable-prompt sequences with the
    contexts frozen at their current values (``pair`` required).
    """
    if kind == "template":
        rows: List[np.ndarray] = []
        for branch in ("normal", "abnormal"):
            vectors = np.stack(
                [encoder.token_embedding(w) for w in TEMPLATE_SENTENCES[branch]]
            )
            rows.append(np.asarray(encoder.encode_sequence(vectors)))
        return TextFeatures(features=np.stack(rows))
    if kind == "fixed_pair":
        if pair is None:
            raise UsageError("fixed_pair features need a PromptPair")
        return encode_text(pair, encoder)
    raise UsageError(f"unknown fixed-feature kind {kind!r}")
