"""Ranking metrics for anomaly detection: AUROC, average precision, and
per-region overlap (PRO), plus the dataset-level evaluation driver.

All three metrics are computed exactly from the data's own score values (no
binning), in float64, with Mann-Whitney tie handling so that any strictly
increasing transform of the scores leaves them unchanged.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import MetricUndefinedError, UsageError
from .fewshot import MemoryBank, combine_maps, few_shot_map

_NEIGHBORS_8 = tuple(
    (dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)
)


def auroc(scores, labels01) -> float:
    """Probability a random positive outranks a random negative, ties at 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels01).ravel()
    if scores.shape != labels.shape:
        raise UsageError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"AUROC undefined with {n_pos} positives and {n_neg} negatives"
        )
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def average_precision(scores, labels01) -> float:
    """Step-interpolated AP over descending-score prefixes.

    Ties keep their original-index order (stable sort), so the value is
    deterministic and invariant under strictly increasing transforms.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels01).ravel()
    if scores.shape != labels.shape:
        raise UsageError(f"scores {scores.shape} and labels {labels.shape} differ")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise MetricUndefinedError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = (labels[order] == 1).astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(np.sum(precision * hits) / n_pos)


def label_regions(mask01: np.ndarray) -> Tuple[np.ndarray, int]:
    """8-connected component labels (0 = background), breadth-first."""
    mask = np.asarray(mask01)
    labels = np.zeros(mask.shape, dtype=np.int64)
    h, w = mask.shape
    current = 0
    for r in range(h):
        for c in range(w):
            if mask[r, c] != 1 or labels[r, c] != 0:
                continue
            current += 1
            queue = deque([(r, c)])
            labels[r, c] = current
            while queue:
                rr, cc = queue.popleft()
                for dr, dc in _NEIGHBORS_8:
                    nr, nc = rr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] == 1 and labels[nr, nc] == 0:
                        labels[nr, nc] = current
                        queue.append((nr, nc))
    return labels, current


def pro(maps: Sequence[np.ndarray], masks01: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Area under mean per-region overlap vs pooled FPR, for FPR <= fpr_limit.

    Regions are 8-connected components of each mask. The curve is sampled at
    every unique score value (descending), integrated by trapezoid with
    linear interpolation at the FPR limit, and normalized by the limit.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise UsageError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    if len(maps) != len(masks01) or not maps:
        raise UsageError("maps and masks must be non-empty and aligned")

    region_of_pixel: List[np.ndarray] = []
    region_sizes: List[int] = []
    next_region = 0
    for m, g in zip(maps, masks01):
        m = np.asarray(m)
        g = np.asarray(g)
        if m.shape != g.shape:
            raise UsageError(f"map {m.shape} and mask {g.shape} differ")
        labels, count = label_regions(g)
        remap = np.where(labels > 0, labels - 1 + next_region, -1)
        region_of_pixel.append(remap.ravel())
        for rid in range(count):
            region_sizes.append(int(np.sum(labels == rid + 1)))
        next_region += count
    if next_region == 0:
        raise MetricUndefinedError("PRO undefined without any anomalous region")

    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    regions = np.concatenate(region_of_pixel)
    n_neg = int(np.sum(regions < 0))
    if n_neg == 0:
        raise MetricUndefinedError("PRO undefined without any normal pixel")
    sizes = np.asarray(region_sizes, dtype=np.float64)

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_regions = regions[order]

    # one curve point per unique score value: pooled FPR and mean region TPR
    step_neg = (sorted_regions < 0).astype(np.float64)
    step_tpr = np.where(
        sorted_regions >= 0, 1.0 / sizes[np.maximum(sorted_regions, 0)], 0.0
    )
    ends = np.flatnonzero(np.append(np.diff(sorted_scores) != 0.0, True))
    fprs = np.concatenate([[0.0], np.cumsum(step_neg)[ends] / n_neg])
    pros = np.concatenate([[0.0], np.cumsum(step_tpr)[ends] / next_region])

    crossing = int(np.searchsorted(fprs, fpr_limit, side="left"))
    # fprs ends at 1.0 >= fpr_limit, so a crossing always exists
    widths = np.diff(fprs[: crossing + 1])
    mids = (pros[:crossing] + pros[1 : crossing + 1]) / 2.0
    area = float(np.sum(widths * mids))
    if fprs[crossing] > fpr_limit:
        lo_f, hi_f = fprs[crossing - 1], fprs[crossing]
        lo_p, hi_p = pros[crossing - 1], pros[crossing]
        pro_at_limit = lo_p + (hi_p - lo_p) * (fpr_limit - lo_f) / (hi_f - lo_f)
        area -= (hi_f - fpr_limit) * (pro_at_limit + hi_p) / 2.0
    return float(area / fpr_limit)


@dataclass
class MetricsReport:
    """Image-level (ac_*) and pixel-level (as_*) metrics, all in [0, 1]."""

    ac_auroc: float
    ac_ap: float
    as_auroc: float
    as_pro: float
    image_count: int
    positive_images: int
    config: Dict = field(default_factory=dict)

    def metric_items(self) -> List[Tuple[str, float]]:
        return [
            ("ac_auroc", self.ac_auroc),
            ("ac_ap", self.ac_ap),
            ("as_auroc", self.as_auroc),
            ("as_pro", self.as_pro),
        ]


def evaluate_scores(
    image_scores,
    image_labels01,
    pixel_maps: Sequence[np.ndarray],
    pixel_masks01: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    config: Dict | None = None,
) -> MetricsReport:
    """Assemble the four-metric report from already-computed scores."""
    labels = np.asarray(image_labels01)
    pooled_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in pixel_maps])
    pooled_masks = np.concatenate([np.asarray(g).ravel() for g in pixel_masks01])
    return MetricsReport(
        ac_auroc=auroc(image_scores, labels),
        ac_ap=average_precision(image_scores, labels),
        as_auroc=auroc(pooled_scores, pooled_masks),
        as_pro=pro(pixel_maps, pixel_masks01, fpr_limit=fpr_limit),
        image_count=len(labels),
        positive_images=int(np.sum(labels == 1)),
        config=dict(config or {}),
    )


def evaluate_dataset(
    model,
    samples: Sequence,
    mode: str = "zero_shot",
    bank: MemoryBank | None = None,
    beta: float = 0.5,
    image_score_mode: str = "cls",
    fpr_limit: float = 0.3,
    workers: int = 1,
    config: Dict | None = None,
) -> MetricsReport:
    """Run a model over labeled samples and compute the four-metric report.

    ``model`` must expose ``predict(image)`` returning an object with
    ``anomaly_map``, ``image_score``, ``stage_features``, and ``grid``.
    In few-shot mode each map is blended with the memory-bank distance map;
    the image score then comes from the class-token path (``cls``) or the
    map maximum (``max_map``).
    """
    if mode not in ("zero_shot", "few_shot"):
        raise UsageError(f"mode must be zero_shot or few_shot, got {mode!r}")
    if mode == "few_shot" and bank is None:
        raise UsageError("few_shot evaluation requires a memory bank")
    if image_score_mode not in ("cls", "max_map"):
        raise UsageError(f"unknown image_score_mode {image_score_mode!r}")
    samples = list(samples)
    if not samples:
        raise UsageError("cannot evaluate an empty dataset")

    def score_one(sample):
        pred = model.predict(sample.image)
        amap = pred.anomaly_map
        if mode == "few_shot":
            fmap = few_shot_map(pred.stage_features, bank, pred.grid, amap.scores.shape)
            amap = combine_maps(amap, fmap, beta=beta)
        if image_score_mode == "max_map":
            score = float(amap.scores.max())
        else:
            score = float(pred.image_score)
        return amap.scores, score

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score_one, samples))
    else:
        results = [score_one(s) for s in samples]

    maps = [r[0] for r in results]
    scores = [r[1] for r in results]
    labels = [(1 if s.label > 0 else 0) for s in samples]
    masks = [(np.asarray(s.mask) > 0).astype(np.int64) for s in samples]
    try:
        return evaluate_scores(
            scores, labels, maps, masks, fpr_limit=fpr_limit, config=config
        )
    except MetricUndefinedError as exc:
        raise MetricUndefinedError(
            f"{exc} (dataset of {len(samples)} samples, {sum(labels)} positive)"
        ) from exc
