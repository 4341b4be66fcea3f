"""Sparse-to-dense depth completion, token depth pooling and the depth cost term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scenes import SparseDepthMap, View


@dataclass
class DenseDepthMap:
    values: np.ndarray  # [H, W] meters
    provenance: str = "ground_truth"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.provenance not in ("ground_truth", "completed"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not np.isfinite(self.values).all() or (self.values <= 0).any():
            raise ValueError("dense depth must be finite and positive")


@dataclass
class TokenDepths:
    values: np.ndarray  # [P]
    grid: tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.values) != self.grid[0] * self.grid[1]:
            raise ValueError("token depth count does not match grid")
        if (self.values <= 0).any():
            raise ValueError("token depths must be positive")


def diamond(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (np.abs(r)[:, None] + np.abs(r)[None, :]) <= radius


def complete_depth(sparse: SparseDepthMap, kernel_radius: int = 2, max_depth: float = 100.0) -> DenseDepthMap:
    """Simplified IP-Basic: invert, diamond dilation, hole filling, 3x3 median, invert back.

    Working on inverted depth makes max-dilation prefer the nearer sample, so
    foreground edges are not eroded by the background. The inversion is
    ``-d`` rather than ``max_depth - d``: both order depths the same way and
    every later step only selects existing values, but negation round-trips
    exactly, so untouched pixels keep their input bits.
    """
    if len(sparse.values) == 0:
        raise ValueError("complete_depth needs at least one depth sample")
    if sparse.values.max() > max_depth:
        raise ValueError(f"max_depth {max_depth} is below the largest sample {sparse.values.max()}")
    inv = np.full(sparse.shape, -np.inf)
    inv[sparse.coords[:, 0], sparse.coords[:, 1]] = -sparse.values
    valid = np.isfinite(inv)

    if kernel_radius > 0:
        grown = ndimage.grey_dilation(inv, footprint=diamond(kernel_radius), mode="constant", cval=-np.inf)
        inv = np.where(valid, inv, grown)
        valid = np.isfinite(inv)

    square = np.ones((3, 3), dtype=bool)
    while not valid.all():
        grown = ndimage.grey_dilation(inv, footprint=square, mode="constant", cval=-np.inf)
        inv = np.where(valid, inv, grown)
        valid = np.isfinite(inv)

    inv = ndimage.median_filter(inv, size=3, mode="nearest")
    return DenseDepthMap(-inv, provenance="completed")


def lower_median(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Median that always returns a member of the sample (the lower middle element)."""
    return np.quantile(values, 0.5, axis=axis, method="lower")


def pool_token_depth(dense: DenseDepthMap | np.ndarray, view: View) -> TokenDepths:
    values = dense.values if isinstance(dense, DenseDepthMap) else np.asarray(dense, dtype=np.float64)
    h, w = view.pixels.shape[:2]
    if values.shape != (h, w):
        raise ValueError(f"depth shape {values.shape} does not match view {(h, w)}")
    rows, cols = view.token_grid
    ph, pw = h // rows, w // cols
    patches = values.reshape(rows, ph, cols, pw).transpose(0, 2, 1, 3).reshape(rows * cols, ph * pw)
    return TokenDepths(lower_median(patches, axis=1), (rows, cols))


def depth_cost(token_depths, centroid_depths, scale: float) -> np.ndarray:
    """|d_i - d_j| / scale for every token i and centroid j, shape [N, M]."""
    if scale <= 0:
        raise ValueError("depth scale must be positive")
    d = np.asarray(getattr(token_depths, "values", token_depths), dtype=np.float64).reshape(-1)
    c = np.asarray(centroid_depths, dtype=np.float64).reshape(-1)
    return np.abs(d[:, None] - c[None, :]) / scale
