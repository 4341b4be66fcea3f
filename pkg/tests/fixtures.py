"""Constructed token fixtures with known ground truth for the clustering tests."""

from __future__ import annotations

import numpy as np

from s3pt.spatial import TokenField


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _grid_positions(rows: int, cols: int) -> np.ndarray:
    yy, xx = np.mgrid[0:rows, 0:cols]
    return np.stack([(xx.ravel() + 0.5) / cols, (yy.ravel() + 0.5) / rows], axis=1)


def visual_twin_fixture(seed: int, noise: float = 0.05, dim: int = 16, grid: int = 8):
    """Two views of one image: background plus two look-alike regions at 5 m and 40 m.

    The twins share a feature mean and are interleaved row by row in the middle
    band of the image, so neither features nor positions tell them apart and
    only depth can. Background sits at 50 m with an orthogonal feature mean.
    Returns (view_a, view_b, truth) with truth labels 0 = background,
    1 = near twin, 2 = far twin over the 2P joint tokens.
    """
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    bg_mean, twin_mean = basis[0], basis[1]
    rows = np.repeat(np.arange(grid), grid)
    band = (rows >= 2) & (rows < grid - 2)
    truth = np.where(band, np.where(rows % 2 == 0, 1, 2), 0)
    means = np.where(truth[:, None] == 0, bg_mean, twin_mean)
    depth_of = np.array([50.0, 5.0, 40.0])
    pos = _grid_positions(grid, grid)

    def view(view_id):
        feats = _unit(means + noise * rng.normal(size=means.shape))
        return TokenField(feats, pos, depth_of[truth], view_id)

    return view("A"), view("B"), np.concatenate([truth, truth])


def area_ratio_fixture(seed: int, ratio: int = 8, tokens_per_view: int = 72, dim: int = 16, noise: float = 0.3):
    """Two feature groups whose areas are ``ratio`` : 1, scattered uniformly over the image."""
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    small = tokens_per_view // (ratio + 1)
    truth = np.zeros(tokens_per_view, dtype=int)
    truth[rng.choice(tokens_per_view, size=small, replace=False)] = 1
    means = basis[truth]

    def view(view_id):
        feats = _unit(means + noise * rng.normal(size=means.shape) / np.sqrt(dim))
        pos = rng.uniform(0, 1, size=(tokens_per_view, 2))
        return TokenField(feats, pos, np.full(tokens_per_view, 10.0), view_id)

    return view("A"), view("B"), np.concatenate([truth, truth])


def tiny_config(**train):
    """Small but complete run config so pipeline tests take seconds."""
    from s3pt.config import RunConfig

    base = dict(total_steps=20, batch_size=2, queue_capacity=60, temp_warmup_steps=5)
    base.update(train)
    return RunConfig.desk(**base).with_updates(
        **{
            "encoder.view_size": 32,
            "encoder.embed_dim": 16,
            "encoder.head_hidden": 16,
            "encoder.head_bottleneck": 8,
            "encoder.num_prototypes": 16,
            "encoder.depth": 1,
            "clustering.num_clusters": 4,
        }
    )
