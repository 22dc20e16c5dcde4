"""Dataset ingestion and portable image formats.

Binary PPM (P6) and PGM (P5) are the normative formats for images, masks,
and heatmaps; PNG is accepted on read where Pillow is importable. Masks are
{-1, +1} grids: raw values >= 128 map to +1 (anomalous), everything below to
-1, matching anti-aliased real-world annotations.

Datasets follow the usual industrial-inspection layout:

    <root>/<category>/train/good/*.ppm
    <root>/<category>/test/<defect>/*.ppm      (defect "good" = normal)
    <root>/<category>/ground_truth/<defect>/<stem>_mask.pgm
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import numerics
from .errors import DataError, FormatError, UsageError

MASK_THRESHOLD = 128
_IMAGE_EXTENSIONS = (".ppm", ".png")
_MASK_EXTENSIONS = (".pgm", ".png")


@dataclass
class Sample:
    """One labeled image: pixels in [0, 1], label and mask in {-1, +1}."""

    image: np.ndarray  # (H, W, 3) float
    label: int
    mask: np.ndarray  # (H, W) int8
    category: str
    split: str
    defect: str
    sample_id: str
    image_path: str = ""
    mask_path: str = ""

    def validate(self) -> "Sample":
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(
                f"{self.sample_id}: mask {self.mask.shape} does not match "
                f"image {self.image.shape[:2]}"
            )
        if self.label not in (-1, 1):
            raise DataError(f"{self.sample_id}: label must be -1 or +1")
        return self


@dataclass
class Dataset:
    samples: List[Sample]
    root: str = ""

    def split(self, name: str) -> List[Sample]:
        if name == "all":
            return list(self.samples)
        return [s for s in self.samples if s.split == name]

    def categories(self) -> List[str]:
        return sorted({s.category for s in self.samples})

    def __len__(self) -> int:
        return len(self.samples)


def _read_pnm_header(blob: bytes, path) -> Tuple[bytes, int, int, int, int]:
    if len(blob) < 2 or blob[:1] != b"P":
        raise FormatError(f"{path}: not a PNM file")
    magic = blob[:2]
    pos = 2
    fields: List[int] = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise FormatError(f"{path}: truncated PNM header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(blob) and blob[pos : pos + 1].isdigit():
                pos += 1
            fields.append(int(blob[start:pos]))
        else:
            raise FormatError(f"{path}: malformed PNM header byte {ch!r}")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after PNM header")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    return magic, width, height, maxval, pos


def _read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, width, height, _, pos = _read_pnm_header(blob, path)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise FormatError(f"{path}: unsupported PNM magic {magic!r}")
    count = width * height * channels
    payload = blob[pos : pos + count]
    if len(payload) != count:
        raise FormatError(f"{path}: truncated PNM payload")
    data = np.frombuffer(payload, dtype=np.uint8)
    return data.reshape(height, width, channels) if channels == 3 else data.reshape(height, width)


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - environment dependent
        raise FormatError(f"{path}: PNG support requires Pillow") from exc
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)


def _quantize(values: np.ndarray) -> np.ndarray:
    # round-half-up so 0.5 maps to 128
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read a color image into (H, W, 3) floats in [0, 1]."""
    ext = os.path.splitext(str(path))[1].lower()
    raw = _read_png(path) if ext == ".png" else _read_pnm(path)
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    return (raw.astype(numerics.default_dtype())) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write (H, W, 3) floats in [0, 1] as binary PPM (P6, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise UsageError(f"expected (H, W, 3) image, got {image.shape}")
    data = _quantize(image)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_mask(path) -> np.ndarray:
    """Read a grayscale mask into {-1, +1}; raw >= 128 means anomalous."""
    ext = os.path.splitext(str(path))[1].lower()
    raw = _read_png(path) if ext == ".png" else _read_pnm(path)
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    return np.where(raw >= MASK_THRESHOLD, 1, -1).astype(np.int8)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a {-1, +1} mask as binary PGM (0 / 255)."""
    mask = np.asarray(mask)
    data = np.where(mask > 0, 255, 0).astype(np.uint8)
    _write_pgm(path, data)


def _write_pgm(path, data: np.ndarray) -> None:
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def save_heatmap(scores: np.ndarray, path) -> None:
    """Write anomaly scores in [0, 1] as 8-bit PGM, round-half-up."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise UsageError(f"expected a 2-D score map, got {scores.shape}")
    if scores.size and (scores.min() < -1e-6 or scores.max() > 1 + 1e-6):
        raise UsageError("heatmap scores must lie in [0, 1]")
    _write_pgm(path, _quantize(np.clip(scores, 0.0, 1.0)))


def read_heatmap(path) -> np.ndarray:
    raw = _read_pnm(path)
    if raw.ndim != 2:
        raise FormatError(f"{path}: heatmaps must be single-channel")
    return raw.astype(numerics.default_dtype()) / 255.0


def save_composite(path, image: np.ndarray, panels: Sequence[np.ndarray]) -> None:
    """Write the image followed by grayscale panels side by side as one PPM."""
    parts = [np.asarray(image)]
    for panel in panels:
        panel = np.clip(np.asarray(panel), 0.0, 1.0)
        parts.append(np.stack([panel] * 3, axis=-1))
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise UsageError(f"composite panels disagree on height: {sorted(heights)}")
    write_image(path, np.concatenate(parts, axis=1))


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of a color image to size x size."""
    image = np.asarray(image)
    if image.shape[0] == size and image.shape[1] == size:
        return image.copy()
    row_op = numerics.linear_resample_matrix(image.shape[0], size)
    col_op = numerics.linear_resample_matrix(image.shape[1], size)
    channels = [row_op @ image[:, :, c].astype(row_op.dtype) @ col_op.T for c in range(3)]
    return np.stack(channels, axis=-1)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resize; never invents values outside {-1, +1}."""
    mask = np.asarray(mask)
    if mask.shape == (size, size):
        return mask.copy()
    return numerics.nearest_resize(mask, size, size)


def _find_mask_path(gt_dir: str, stem: str):
    for suffix in ("_mask", ""):
        for ext in _MASK_EXTENSIONS:
            candidate = os.path.join(gt_dir, stem + suffix + ext)
            if os.path.isfile(candidate):
                return candidate
    return None


def _list_images(directory: str) -> List[str]:
    try:
        names = sorted(os.listdir(directory))
    except OSError:
        return []
    return [
        os.path.join(directory, n)
        for n in names
        if os.path.splitext(n)[1].lower() in _IMAGE_EXTENSIONS
    ]


def load_dataset(root, image_size: int = 64) -> Dataset:
    """Load every category under ``root``; see the module docstring for layout.

    Train images are normal by construction (all -1 masks); test defect
    images must have a ground-truth mask or a DataError names the gap.
    Images are resized bilinearly, masks by nearest neighbor.
    """
    root = str(root)
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} is not a directory")
    categories = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    samples: List[Sample] = []
    for category in categories:
        cat_dir = os.path.join(root, category)
        if not (
            os.path.isdir(os.path.join(cat_dir, "train"))
            or os.path.isdir(os.path.join(cat_dir, "test"))
        ):
            continue
        for path in _list_images(os.path.join(cat_dir, "train", "good")):
            samples.append(_load_sample(path, category, "train", "good", None, image_size))
        test_dir = os.path.join(cat_dir, "test")
        defects = sorted(
            d for d in (os.listdir(test_dir) if os.path.isdir(test_dir) else [])
            if os.path.isdir(os.path.join(test_dir, d))
        )
        for defect in defects:
            for path in _list_images(os.path.join(test_dir, defect)):
                mask_path = None
                if defect != "good":
                    stem = os.path.splitext(os.path.basename(path))[0]
                    gt_dir = os.path.join(cat_dir, "ground_truth", defect)
                    mask_path = _find_mask_path(gt_dir, stem)
                    if mask_path is None:
                        raise DataError(
                            f"missing ground-truth mask for {path} "
                            f"(looked under {gt_dir})"
                        )
                samples.append(
                    _load_sample(path, category, "test", defect, mask_path, image_size)
                )
    if not samples:
        raise DataError(f"no samples found under {root!r}")
    return Dataset(samples=samples, root=root)


def _load_sample(path, category, split, defect, mask_path, image_size) -> Sample:
    try:
        image = read_image(path)
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    image = resize_image(image, image_size)
    if mask_path is None:
        mask = np.full((image_size, image_size), -1, dtype=np.int8)
        label = -1
    else:
        mask = resize_mask(read_mask(mask_path), image_size)
        label = 1
    stem = os.path.splitext(os.path.basename(path))[0]
    return Sample(
        image=image.astype(numerics.default_dtype()),
        label=label,
        mask=mask,
        category=category,
        split=split,
        defect=defect,
        sample_id=f"{category}/{split}/{defect}/{stem}",
        image_path=str(path),
        mask_path=str(mask_path or ""),
    ).validate()


def write_manifest(path, samples: Sequence[Sample]) -> None:
    """Tab-separated manifest: path, label, mask path, category, split."""
    lines = [
        "\t".join(
            [s.image_path, str(s.label), s.mask_path or "-", s.category, s.split]
        )
        for s in samples
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def heatmap_name(sample_id: str) -> str:
    return sample_id.replace("/", "__") + ".pgm"
