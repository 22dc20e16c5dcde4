"""Dense-array numerical substrate: softmax, normalization, resampling, smoothing.

Arrays are plain numpy ndarrays, row-major, 32-bit floats by default. A 64-bit
mode can be selected (globally or via the ``precision`` context manager) for
finite-difference gradient validation, where float32 noise would swamp the
comparison.

Resampling uses half-pixel-center sampling (no corner alignment) and smoothing
uses reflective padding; both are expressed as explicit 1-D operator matrices
so the same linear maps can be applied forward and transposed (the latter is
what reverse-mode differentiation needs).
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import UsageError

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Switch the global float width ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise UsageError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float width."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def as_float(x) -> np.ndarray:
    """Coerce to an ndarray of the current default float dtype."""
    return np.asarray(x, dtype=_DEFAULT_DTYPE)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis``.

    The running maximum is subtracted before exponentiation, so arbitrarily
    shifted inputs produce identical outputs. Empty input is rejected.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise UsageError("softmax of an empty array is undefined")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def l2_normalize(x, eps: float = 1e-12, axis: int = -1) -> np.ndarray:
    """Scale rows (along ``axis``) to unit L2 norm.

    Vectors with norm below ``eps`` are divided by ``eps`` instead, so zero
    input maps to zero rather than NaN.
    """
    if eps <= 0:
        raise UsageError("l2_normalize requires eps > 0")
    x = np.asarray(x)
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return x / np.maximum(norm, eps)


def linear_resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear-interpolation operator (n_out x n_in), half-pixel centers.

    Output sample i reads source coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to the valid range; each row holds the two interpolation weights
    (rows sum to 1, so constants are preserved exactly).
    """
    if n_in < 1 or n_out < 1:
        raise UsageError(f"resample sizes must be >= 1, got {n_in} -> {n_out}")
    op = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        op[i, lo] += 1.0 - frac
        op[i, hi] += frac
    return op.astype(_DEFAULT_DTYPE)


def nearest_resample_indices(n_in: int, n_out: int) -> np.ndarray:
    """Source index per output sample under half-pixel-center nearest lookup."""
    if n_in < 1 or n_out < 1:
        raise UsageError(f"resample sizes must be >= 1, got {n_in} -> {n_out}")
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def bilinear_upsample(grid, out_h: int, out_w: int) -> np.ndarray:
    """Resample a 2-D grid to (out_h, out_w) by separable linear interpolation.

    Constant input yields constant output and the result never leaves the
    input's value range; the map is linear in its input.
    """
    grid = np.asarray(grid)
    if grid.ndim == 3 and grid.shape[2] == 1:
        grid = grid[:, :, 0]
    if grid.ndim != 2:
        raise UsageError(f"expected a 2-D grid, got shape {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise UsageError(f"output dims must be >= 1, got {out_h}x{out_w}")
    row_op = linear_resample_matrix(grid.shape[0], out_h)
    col_op = linear_resample_matrix(grid.shape[1], out_w)
    return row_op @ grid.astype(row_op.dtype) @ col_op.T


def nearest_resize(grid, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize; output values are a subset of input values."""
    grid = np.asarray(grid)
    rows = nearest_resample_indices(grid.shape[0], out_h)
    cols = nearest_resample_indices(grid.shape[1], out_w)
    return grid[np.ix_(rows, cols)]


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel truncated at 4 sigma."""
    if sigma < 0:
        raise UsageError(f"sigma must be >= 0, got {sigma}")
    radius = int(4.0 * sigma + 0.5)
    if sigma == 0 or radius == 0:
        return np.ones(1, dtype=np.float64)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    return kernel / kernel.sum()


def _reflect_index(i: int, n: int) -> int:
    # Symmetric reflection (edge sample repeated): ... 1 0 | 0 1 ... n-1 | n-1 ...
    if n == 1:
        return 0
    period = 2 * n
    i = i % period
    if i < 0:
        i += period
    return i if i < n else period - 1 - i


def gaussian_blur_matrix(n: int, sigma: float) -> np.ndarray:
    """1-D Gaussian blur operator (n x n) with reflective padding."""
    kernel = gaussian_kernel1d(sigma)
    radius = (len(kernel) - 1) // 2
    op = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for k, weight in enumerate(kernel):
            op[i, _reflect_index(i + k - radius, n)] += weight
    return op.astype(_DEFAULT_DTYPE)


def gaussian_smooth(grid, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-D map; sigma == 0 is the identity."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise UsageError(f"expected a 2-D map, got shape {grid.shape}")
    if sigma < 0:
        raise UsageError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return grid.copy()
    row_op = gaussian_blur_matrix(grid.shape[0], sigma)
    col_op = gaussian_blur_matrix(grid.shape[1], sigma)
    return row_op @ grid.astype(row_op.dtype) @ col_op.T


def require_finite(x, what: str) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise UsageError(f"{what} contains non-finite values")
    return x
