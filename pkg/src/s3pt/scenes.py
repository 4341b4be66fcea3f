"""Synthetic long-tailed scenes with layered depth, paired crops and sparse depth."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 64
    num_classes: int = 8
    class_frequency_exponent: float = 1.0
    size_range: tuple[float, float] = (0.15, 0.5)
    depth_range: tuple[float, float] = (2.0, 50.0)
    objects_per_scene: tuple[int, int] = (2, 6)
    texture_noise_std: float = 0.1
    channels: int = 4
    # explicit object-class weights (ids 1..num_classes-1); overrides the power law
    class_weights: tuple[float, ...] | None = None
    # two object classes sharing a feature mean; first is near, second is far
    twin_classes: tuple[int, int] | None = (1, 2)
    haze: float = 0.15
    palette_seed: int = 0

    def __post_init__(self):
        near, far = self.depth_range
        lo, hi = self.size_range
        omin, omax = self.objects_per_scene
        if not 0 < near < far:
            raise ValueError(f"depth_range must satisfy 0 < near < far, got {self.depth_range}")
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"size_range must satisfy 0 < min <= max <= 1, got {self.size_range}")
        if not 0 <= omin <= omax:
            raise ValueError(f"bad objects_per_scene {self.objects_per_scene}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background plus one object class)")
        if self.class_frequency_exponent < 0:
            raise ValueError("class_frequency_exponent must be >= 0")
        if self.texture_noise_std < 0:
            raise ValueError("texture_noise_std must be >= 0")
        if self.image_size < 1 or self.channels < 1:
            raise ValueError("image_size and channels must be positive")
        if self.class_weights is not None:
            if len(self.class_weights) != self.num_classes - 1:
                raise ValueError("class_weights needs one entry per object class")
            if min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
                raise ValueError("class_weights must be non-negative with positive sum")
        if self.twin_classes is not None:
            a, b = self.twin_classes
            if a == b or not (1 <= a < self.num_classes and 1 <= b < self.num_classes):
                raise ValueError(f"bad twin_classes {self.twin_classes}")

    def class_frequencies(self) -> np.ndarray:
        """Sampling probabilities of object classes 1..num_classes-1."""
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
        else:
            k = np.arange(self.num_classes - 1, dtype=np.float64)
            w = (k + 1.0) ** (-self.class_frequency_exponent)
        return w / w.sum()

    def class_means(self) -> np.ndarray:
        """Fixed per-class feature means [num_classes, channels]."""
        rng = np.random.default_rng(self.palette_seed)
        means = rng.uniform(0.0, 1.0, size=(self.num_classes, self.channels))
        if self.twin_classes is not None:
            a, b = self.twin_classes
            means[b] = means[a]
        return means


@dataclass
class Scene:
    pixels: np.ndarray  # [H, W, C] float64
    class_mask: np.ndarray  # [H, W] int
    depth_map: np.ndarray  # [H, W] meters
    seed: int
    object_mask: np.ndarray | None = None  # [H, W] instance ids, 0 = background


@dataclass
class View:
    pixels: np.ndarray  # [h, w, C]
    crop_box: tuple[float, float, float, float]  # x0, y0, x1, y1 normalized
    flip: bool
    token_grid: tuple[int, int]

    def __post_init__(self):
        x0, y0, x1, y1 = self.crop_box
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"invalid crop_box {self.crop_box}")
        h, w = self.pixels.shape[:2]
        rows, cols = self.token_grid
        if h % rows or w % cols:
            raise ValueError(f"token_grid {self.token_grid} does not divide view {h}x{w}")

    @property
    def patch_size(self) -> tuple[int, int]:
        h, w = self.pixels.shape[:2]
        return h // self.token_grid[0], w // self.token_grid[1]

    def source_indices(self, source_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-neighbour source (row, col) index grids for every view pixel."""
        H, W = source_shape
        h, w = self.pixels.shape[:2]
        x0, y0, x1, y1 = self.crop_box
        u = (np.arange(w) + 0.5) / w
        if self.flip:
            u = u[::-1]
        v = (np.arange(h) + 0.5) / h
        cols = np.clip(np.floor((x0 + u * (x1 - x0)) * W).astype(int), 0, W - 1)
        rows = np.clip(np.floor((y0 + v * (y1 - y0)) * H).astype(int), 0, H - 1)
        return np.meshgrid(rows, cols, indexing="ij")

    def crop(self, source: np.ndarray) -> np.ndarray:
        """Resample any source-image array (mask, depth, ...) onto this view."""
        rr, cc = self.source_indices(source.shape[:2])
        return source[rr, cc]

    def token_positions(self) -> np.ndarray:
        """[P, 2] token centres (x, y) in source-image normalized coordinates."""
        rows, cols = self.token_grid
        x0, y0, x1, y1 = self.crop_box
        u = (np.arange(cols) + 0.5) / cols
        if self.flip:
            u = u[::-1]
        v = (np.arange(rows) + 0.5) / rows
        xx, yy = np.meshgrid(x0 + u * (x1 - x0), y0 + v * (y1 - y0))
        return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class SparseDepthMap:
    coords: np.ndarray  # [N, 2] (row, col)
    values: np.ndarray  # [N]
    shape: tuple[int, int]
    fill_fraction: float = field(init=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        H, W = self.shape
        if len(self.coords) != len(self.values):
            raise ValueError("coords and values differ in length")
        if len(self.coords):
            r, c = self.coords[:, 0], self.coords[:, 1]
            if r.min() < 0 or c.min() < 0 or r.max() >= H or c.max() >= W:
                raise ValueError("sparse depth coords out of bounds")
            if len(np.unique(r * W + c)) != len(r):
                raise ValueError("sparse depth coords are not unique")
            if (self.values <= 0).any():
                raise ValueError("sparse depth values must be positive")
        self.fill_fraction = len(self.values) / float(H * W)

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.shape, fill, dtype=np.float64)
        out[self.coords[:, 0], self.coords[:, 1]] = self.values
        return out


def _object_depth(cfg: SceneConfig, cls: int, rng: np.random.Generator) -> float:
    near, far = cfg.depth_range
    span = far - near
    if cfg.twin_classes is not None:
        a, b = cfg.twin_classes
        if cls == a:
            return float(rng.uniform(near, near + 0.2 * span))
        if cls == b:
            return float(rng.uniform(near + 0.6 * span, near + 0.85 * span))
    return float(rng.uniform(near, near + 0.9 * span))


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Paint a random set of flat-depth objects over a far background.

    Objects are painted far to near, so nearer objects occlude in both the class
    mask and the depth map.
    """
    rng = np.random.default_rng(seed)
    n = config.image_size
    near, far = config.depth_range
    means = config.class_means()
    freqs = config.class_frequencies()

    n_obj = int(rng.integers(config.objects_per_scene[0], config.objects_per_scene[1] + 1))
    classes = rng.choice(np.arange(1, config.num_classes), size=n_obj, p=freqs)
    objects = []
    for cls in classes:
        lo, hi = config.size_range
        sw, sh = rng.uniform(lo, hi, size=2)
        cx, cy = rng.uniform(0.0, 1.0, size=2)
        ellipse = bool(rng.random() < 0.5)
        depth = _object_depth(config, int(cls), rng)
        objects.append((depth, int(cls), cx, cy, sw, sh, ellipse))

    class_mask = np.zeros((n, n), dtype=np.int64)
    object_mask = np.zeros((n, n), dtype=np.int64)
    depth_map = np.full((n, n), far, dtype=np.float64)
    yy, xx = np.mgrid[0:n, 0:n]
    xs = (xx + 0.5) / n
    ys = (yy + 0.5) / n
    # stable sort on depth: far first
    order = sorted(range(n_obj), key=lambda i: -objects[i][0])
    for inst, i in enumerate(order, start=1):
        depth, cls, cx, cy, sw, sh, ellipse = objects[i]
        dx = (xs - cx) / (sw / 2)
        dy = (ys - cy) / (sh / 2)
        inside = (dx**2 + dy**2 <= 1.0) if ellipse else ((np.abs(dx) <= 1) & (np.abs(dy) <= 1))
        class_mask[inside] = cls
        object_mask[inside] = inst
        depth_map[inside] = depth

    noise = rng.normal(0.0, 1.0, size=(n, n, config.channels)) * config.texture_noise_std
    texture = means[class_mask] + noise
    haze_weight = config.haze * (depth_map - near) / (far - near)
    pixels = (1.0 - haze_weight[..., None]) * texture + haze_weight[..., None] * 0.5
    return Scene(pixels=pixels, class_mask=class_mask, depth_map=depth_map, seed=seed, object_mask=object_mask)


def sample_views(
    scene: Scene,
    min_scale: float = 0.25,
    max_scale: float = 1.0,
    seed: int = 0,
    view_size: int = 64,
    patch_size: int = 8,
    flip_prob: float = 0.5,
) -> tuple[View, View]:
    """Two random square crops (area fraction in [min_scale, max_scale]) resized to ``view_size``."""
    if not 0 < min_scale <= max_scale <= 1:
        raise ValueError(f"need 0 < min_scale <= max_scale <= 1, got {min_scale}, {max_scale}")
    if view_size % patch_size:
        raise ValueError("patch_size must divide view_size")
    rng = np.random.default_rng(seed)
    grid = (view_size // patch_size, view_size // patch_size)
    views = []
    for _ in range(2):
        side = float(np.sqrt(rng.uniform(min_scale, max_scale)))
        x0 = float(rng.uniform(0.0, 1.0 - side))
        y0 = float(rng.uniform(0.0, 1.0 - side))
        if side >= 1.0:
            x0 = y0 = 0.0
        box = (x0, y0, min(1.0, x0 + side), min(1.0, y0 + side))
        flip = bool(rng.random() < flip_prob)
        placeholder = View(np.zeros((view_size, view_size, 1)), box, flip, grid)
        views.append(View(placeholder.crop(scene.pixels), box, flip, grid))
    return views[0], views[1]


def sample_sparse_depth(
    scene: Scene,
    fill_fraction: float,
    pattern: str = "uniform",
    seed: int = 0,
    row_step: int = 8,
) -> SparseDepthMap:
    """Keep exactly ``round(fill_fraction * H * W)`` ground-truth depth samples.

    ``scanline`` restricts samples to rows ``r % row_step == 0`` like LiDAR sweeps.
    """
    if not 0 < fill_fraction <= 1:
        raise ValueError(f"fill_fraction must be in (0, 1], got {fill_fraction}")
    H, W = scene.depth_map.shape
    count = int(round(fill_fraction * H * W))
    rng = np.random.default_rng(seed)
    if pattern == "uniform":
        candidates = np.arange(H * W)
    elif pattern == "scanline":
        if fill_fraction == 1:
            candidates = np.arange(H * W)
        else:
            rows = np.arange(0, H, row_step)
            candidates = (rows[:, None] * W + np.arange(W)[None, :]).ravel()
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    if count > len(candidates):
        raise ValueError(f"{count} samples requested but pattern {pattern!r} offers {len(candidates)}")
    flat = np.sort(rng.choice(candidates, size=count, replace=False))
    coords = np.stack([flat // W, flat % W], axis=1)
    return SparseDepthMap(coords, scene.depth_map.ravel()[flat], (H, W))
