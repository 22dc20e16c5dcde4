"""Hierarchical fusion of adapted stage features with text features.

Stage similarity logits are summed with per-stage weights first and the
per-token two-way softmax is applied after the sum; the abnormal channel is
then upsampled to pixel resolution (and optionally blurred) to form the
anomaly map. The image-level score comes from the class token through a
frozen projection against the same text rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from . import autodiff as ag
from . import numerics
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class FusionConfig:
    alpha: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    tau: float = 1.0
    tau_cls: float = 1.0
    sigma: float = 0.0

    def validate(self) -> "FusionConfig":
        if len(self.alpha) != 4 or not all(np.isfinite(self.alpha)):
            raise ConfigError(f"alpha must be 4 finite weights, got {self.alpha}")
        if self.tau <= 0 or self.tau_cls <= 0:
            raise ConfigError("temperatures must be positive")
        if self.sigma < 0:
            raise ConfigError("smoothing sigma must be >= 0")
        return self


@dataclass
class AnomalyMap:
    """Dense per-pixel anomaly scores in [0, 1] plus the token logits behind them."""

    scores: np.ndarray  # (imageH, imageW)
    token_logits: np.ndarray = field(repr=False)  # (L, 2)


def fuse(stage_features: Sequence, text_features, cfg: FusionConfig):
    """Weighted sum of per-stage similarity logits: sum_i alpha_i F*_i T^T / tau.

    Channel 0 scores the normal row, channel 1 the abnormal row. Accepts
    Vars (training) or arrays; stages must agree on token count.
    """
    cfg = cfg.validate()
    if len(stage_features) != 4:
        raise UsageError(f"expected 4 stage feature maps, got {len(stage_features)}")
    lengths = {f.shape[0] for f in stage_features}
    if len(lengths) != 1:
        raise UsageError(f"stages disagree on token count: {sorted(lengths)}")
    text_t = ag.transpose(text_features, (1, 0))
    logits = None
    for alpha_i, feats in zip(cfg.alpha, stage_features):
        term = ag.mul(ag.matmul(feats, text_t), alpha_i / cfg.tau)
        logits = term if logits is None else ag.add(logits, term)
    return logits


def token_probabilities(logits):
    """Per-token softmax over the (normal, abnormal) channels."""
    return ag.softmax_last(logits)


def anomaly_map(
    logits,
    grid: Tuple[int, int],
    image_dims: Tuple[int, int],
    cfg: FusionConfig,
) -> AnomalyMap:
    """Abnormal-channel probabilities upsampled to image resolution.

    Returns plain arrays; the differentiable variant used in training is
    ``abnormal_probability_map``.
    """
    logits = logits.data if ag.is_var(logits) else np.asarray(logits)
    grid_h, grid_w = grid
    if logits.ndim != 2 or logits.shape != (grid_h * grid_w, 2):
        raise UsageError(
            f"expected ({grid_h * grid_w}, 2) logits for a {grid_h}x{grid_w} grid, "
            f"got {logits.shape}"
        )
    probs = numerics.softmax(logits, axis=-1)
    abnormal = probs[:, 1].reshape(grid_h, grid_w)
    scores = numerics.bilinear_upsample(abnormal, image_dims[0], image_dims[1])
    if cfg.sigma > 0:
        scores = numerics.gaussian_smooth(scores, cfg.sigma)
    return AnomalyMap(scores=scores, token_logits=logits)


def abnormal_probability_map(logits, grid: Tuple[int, int], image_dims: Tuple[int, int], cfg: FusionConfig):
    """Differentiable map pipeline: softmax -> reshape -> upsample -> blur."""
    grid_h, grid_w = grid
    probs = token_probabilities(logits)
    abnormal = ag.reshape(probs[:, 1], (grid_h, grid_w))
    dtype = abnormal.dtype if ag.is_var(abnormal) else np.asarray(abnormal).dtype
    row_op = numerics.linear_resample_matrix(grid_h, image_dims[0]).astype(dtype)
    col_op = numerics.linear_resample_matrix(grid_w, image_dims[1]).astype(dtype)
    out = ag.matmul(ag.matmul(row_op, abnormal), col_op.T)
    if cfg.sigma > 0:
        blur_r = numerics.gaussian_blur_matrix(image_dims[0], cfg.sigma).astype(dtype)
        blur_c = numerics.gaussian_blur_matrix(image_dims[1], cfg.sigma).astype(dtype)
        out = ag.matmul(ag.matmul(blur_r, out), blur_c.T)
    return out


def image_score(class_token: np.ndarray, cls_proj: np.ndarray, text_features, cfg: FusionConfig):
    """Two-way softmax score of the projected class token; abnormal side.

    Differentiable in ``text_features`` when given as a Var.
    """
    cfg = cfg.validate()
    f_cls = numerics.l2_normalize(np.asarray(class_token) @ np.asarray(cls_proj))
    sims = ag.mul(ag.matmul(text_features, f_cls), 1.0 / cfg.tau_cls)
    probs = ag.softmax_last(sims)
    return probs[1]


def per_stage_maps(
    stage_features: Sequence[np.ndarray],
    text_features: np.ndarray,
    grid: Tuple[int, int],
    image_dims: Tuple[int, int],
    cfg: FusionConfig,
) -> List[AnomalyMap]:
    """The fusion pipeline applied to each stage alone (one-hot alpha)."""
    maps = []
    for i in range(4):
        one_hot = tuple(1.0 if j == i else 0.0 for j in range(4))
        solo = FusionConfig(alpha=one_hot, tau=cfg.tau, tau_cls=cfg.tau_cls, sigma=cfg.sigma)
        logits = fuse(stage_features, text_features, solo)
        maps.append(anomaly_map(logits, grid, image_dims, solo))
    return maps
