"""Window-attention adapter: partition, frozen value-value attention per
window, reverse, then a trainable affine projection into the text feature
space.

The attention projections are injected from the backbone and never updated;
attention scores come from the value vectors against themselves, so the
pre-softmax score matrix is symmetric. The query/key matrices ride along
unused except in the ``qkv`` ablation mode. Only the per-stage projection
(weight + bias) is trainable, and a ``linear`` adapter kind skips the
attention entirely for the corresponding ablation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import autodiff as ag
from . import numerics
from .backbone import AttentionWeights
from .errors import ConfigError, UsageError

ADAPTER_KINDS = ("fwa", "linear")
ATTENTION_MODES = ("vv", "qkv")


@dataclass
class WindowGrid:
    """Tokens regrouped into non-overlapping windows, row-major both ways."""

    windows: np.ndarray  # (num_windows, h*w, C)
    window_dims: Tuple[int, int]
    grid_dims: Tuple[int, int]


@dataclass
class AdapterParams:
    """Trainable per-stage projection; everything else in the adapter is frozen."""

    weight: ag.Var  # (C_vis, C_text)
    bias: ag.Var  # (C_text,)
    stage: int
    kind: str = "fwa"

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")


def new_adapter_params(
    c_vis: int, c_text: int, stage: int, seed: int, kind: str = "fwa"
) -> AdapterParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    dtype = numerics.default_dtype()
    weight = rng.normal(0.0, 1.0 / np.sqrt(c_vis), size=(c_vis, c_text)).astype(dtype)
    bias = np.zeros(c_text, dtype=dtype)
    return AdapterParams(
        weight=ag.Var(weight, requires_grad=True),
        bias=ag.Var(bias, requires_grad=True),
        stage=stage,
        kind=kind,
    )


def _check_divisible(grid_h: int, grid_w: int, h: int, w: int) -> None:
    if h < 1 or w < 1 or grid_h % h != 0 or grid_w % w != 0:
        raise ConfigError(
            f"window {h}x{w} does not tile token grid {grid_h}x{grid_w}"
        )


def window_partition(tokens: np.ndarray, grid_h: int, grid_w: int, h: int, w: int) -> WindowGrid:
    """Tile an (L, C) row-major token grid into (H/h * W/w) windows.

    Window (r, c) holds tokens {(r*h + i, c*w + j)}; the multiset of token
    rows is unchanged, only regrouped.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] != grid_h * grid_w:
        raise UsageError(
            f"expected ({grid_h * grid_w}, C) tokens for a {grid_h}x{grid_w} grid, "
            f"got {tokens.shape}"
        )
    _check_divisible(grid_h, grid_w, h, w)
    c = tokens.shape[1]
    grid = tokens.reshape(grid_h // h, h, grid_w // w, w, c)
    windows = grid.transpose(0, 2, 1, 3, 4).reshape(-1, h * w, c)
    return WindowGrid(windows=windows, window_dims=(h, w), grid_dims=(grid_h, grid_w))


def window_reverse(wg: WindowGrid) -> np.ndarray:
    """Exact inverse of window_partition (bit-exact round trip)."""
    h, w = wg.window_dims
    grid_h, grid_w = wg.grid_dims
    windows = np.asarray(wg.windows)
    num = (grid_h // h) * (grid_w // w)
    if windows.ndim != 3 or windows.shape[0] != num or windows.shape[1] != h * w:
        raise UsageError(
            f"inconsistent window grid: windows {windows.shape}, "
            f"dims {h}x{w} over {grid_h}x{grid_w}"
        )
    c = windows.shape[2]
    grid = windows.reshape(grid_h // h, grid_w // w, h, w, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape(grid_h * grid_w, c)


def vv_attention(tokens: np.ndarray, weights: AttentionWeights, mode: str = "vv") -> np.ndarray:
    """Multi-head attention with value-derived scores, frozen weights.

    Accepts (N, C) or a stacked (num_windows, N, C) batch. Per head the
    scores are V V^T / sqrt(d_head) (symmetric); ``mode='qkv'`` restores
    ordinary query-key scoring for the ablation.
    """
    if mode not in ATTENTION_MODES:
        raise UsageError(f"attention mode must be one of {ATTENTION_MODES}, got {mode!r}")
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None, :, :]
    if tokens.ndim != 3:
        raise UsageError(f"expected (N, C) or (B, N, C) tokens, got {tokens.shape}")
    b, n, c = tokens.shape
    if c != weights.w_v.shape[0]:
        raise UsageError(
            f"token width {c} does not match attention weights {weights.w_v.shape}"
        )
    heads = weights.heads
    dh = c // heads

    v = (tokens @ weights.w_v).reshape(b, n, heads, dh)
    if mode == "vv":
        q = k = v
    else:
        q = (tokens @ weights.w_q).reshape(b, n, heads, dh)
        k = (tokens @ weights.w_k).reshape(b, n, heads, dh)
    scores = np.einsum("bihd,bjhd->bhij", q, k) / np.sqrt(dh)
    attn = numerics.softmax(scores, axis=-1)
    ctx = np.einsum("bhij,bjhd->bihd", attn, v).reshape(b, n, c)
    out = ctx @ weights.w_o
    return out[0] if squeeze else out


def attended_features(
    tokens: np.ndarray,
    weights: AttentionWeights,
    grid_dims: Tuple[int, int],
    window: Tuple[int, int],
    mode: str = "vv",
) -> np.ndarray:
    """partition -> batched per-window attention -> reverse, as one (L, C) map."""
    wg = window_partition(tokens, grid_dims[0], grid_dims[1], window[0], window[1])
    wg.windows = vv_attention(wg.windows, weights, mode=mode)
    return window_reverse(wg)


def project_tokens(params: AdapterParams, tokens):
    """Trainable affine map plus row normalization; accepts Var or ndarray."""
    z = ag.add(ag.matmul(tokens, params.weight), params.bias)
    return ag.l2_normalize_rows(z)


def adapter_forward(
    params: AdapterParams,
    tokens: np.ndarray,
    weights: AttentionWeights,
    grid_dims: Tuple[int, int],
    window: Tuple[int, int],
    mode: str = "vv",
) -> np.ndarray:
    """Full adapter pipeline on (L, C_vis) patch tokens; rows come out unit-norm.

    kind='fwa': windowed frozen attention, then the trainable projection.
    kind='linear': the trainable projection alone.
    """
    tokens = np.asarray(tokens)
    if params.kind == "fwa":
        tokens = attended_features(tokens, weights, grid_dims, window, mode=mode)
    out = project_tokens(params, tokens)
    return out.data if ag.is_var(out) else out


def attention_pair_count(grid_h: int, grid_w: int, h: int, w: int) -> int:
    """Token-pair scores computed by windowed attention on an HxW grid."""
    _check_divisible(grid_h, grid_w, h, w)
    num_windows = (grid_h // h) * (grid_w // w)
    return num_windows * (h * w) ** 2
