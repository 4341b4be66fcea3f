import numpy as np
import pytest
from scipy import stats

from s3pt.scenes import SceneConfig, SparseDepthMap, View, generate_scene, sample_sparse_depth, sample_views


def object_class_counts(cfg: SceneConfig, n: int, seed0: int = 0) -> np.ndarray:
    """Sampled object-class counts, read back through the instance mask so occluded objects still count."""
    counts = np.zeros(cfg.num_classes - 1)
    for s in range(seed0, seed0 + n):
        rng = np.random.default_rng(s)
        k = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
        classes = rng.choice(np.arange(1, cfg.num_classes), size=k, p=cfg.class_frequencies())
        np.add.at(counts, classes - 1, 1)
    return counts


def test_determinism():
    cfg = SceneConfig()
    a, b = generate_scene(cfg, 11), generate_scene(cfg, 11)
    for name in ("pixels", "class_mask", "depth_map", "object_mask"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert not np.array_equal(a.pixels, generate_scene(cfg, 12).pixels)


def test_empty_scene_is_background_at_far():
    cfg = SceneConfig(objects_per_scene=(0, 0))
    scene = generate_scene(cfg, 3)
    assert (scene.class_mask == 0).all()
    assert (scene.depth_map == cfg.depth_range[1]).all()


def test_exponent_zero_is_uniform_chi_square():
    # generate_scene draws the object count and classes first from its own rng,
    # so replaying those draws gives exactly the painted class sequence.
    cfg = SceneConfig(class_frequency_exponent=0.0, twin_classes=None)
    counts = object_class_counts(cfg, 1000, seed0=7)
    assert stats.chisquare(counts).pvalue > 0.01


def test_replayed_classes_match_painted_instances():
    cfg = SceneConfig()
    for s in range(30):
        scene = generate_scene(cfg, s)
        rng = np.random.default_rng(s)
        k = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
        classes = set(rng.choice(np.arange(1, cfg.num_classes), size=k, p=cfg.class_frequencies()).tolist())
        assert set(np.unique(scene.class_mask).tolist()) - {0} <= classes


def test_long_tail_rank_correlation():
    cfg = SceneConfig(class_frequency_exponent=1.0)
    counts = object_class_counts(cfg, 1000)
    rho = stats.spearmanr(counts, cfg.class_frequencies()).statistic
    assert rho > 0.95


def test_visible_long_tail_by_area():
    cfg = SceneConfig(class_frequency_exponent=1.5)
    area = np.zeros(cfg.num_classes)
    for s in range(300):
        area += np.bincount(generate_scene(cfg, s).class_mask.ravel(), minlength=cfg.num_classes)
    # background occupies the largest area
    assert area.argmax() == 0
    assert area[1] > area[-1]


def test_class_frequencies_sum_to_one_and_custom_weights():
    cfg = SceneConfig(num_classes=4, class_weights=(0.8, 0.15, 0.05))
    assert cfg.class_frequencies() == pytest.approx([0.8, 0.15, 0.05])
    assert SceneConfig().class_frequencies().sum() == pytest.approx(1.0)


def test_invariants_hold():
    cfg = SceneConfig()
    near, far = cfg.depth_range
    for s in range(20):
        scene = generate_scene(cfg, s)
        assert scene.class_mask.max() < cfg.num_classes
        assert scene.depth_map.min() >= near and scene.depth_map.max() <= far
        assert scene.pixels.shape == (cfg.image_size, cfg.image_size, cfg.channels)


def test_occlusion_consistency():
    # every instance is one class at one depth, so mask and depth agree on the visible object
    cfg = SceneConfig(objects_per_scene=(6, 6))
    for s in range(20):
        scene = generate_scene(cfg, s)
        for inst in np.unique(scene.object_mask):
            if inst == 0:
                continue
            region = scene.object_mask == inst
            assert len(np.unique(scene.class_mask[region])) == 1
            assert len(np.unique(scene.depth_map[region])) == 1


def test_twins_share_means_and_split_depth():
    cfg = SceneConfig()
    means = cfg.class_means()
    a, b = cfg.twin_classes
    assert np.array_equal(means[a], means[b])
    near, far = cfg.depth_range
    da, db = [], []
    for s in range(200):
        scene = generate_scene(cfg, s)
        da += scene.depth_map[scene.class_mask == a].tolist()
        db += scene.depth_map[scene.class_mask == b].tolist()
    assert max(da) < min(db)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(depth_range=(5.0, 5.0)),
        dict(depth_range=(0.0, 5.0)),
        dict(size_range=(0.0, 0.5)),
        dict(size_range=(0.2, 1.5)),
        dict(class_frequency_exponent=-1.0),
        dict(num_classes=1),
        dict(objects_per_scene=(3, 2)),
    ],
)
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        SceneConfig(**kwargs)


def test_full_scale_views_cover_image():
    scene = generate_scene(SceneConfig(), 0)
    va, vb = sample_views(scene, 1.0, 1.0, seed=4, flip_prob=0.0)
    assert va.crop_box == (0.0, 0.0, 1.0, 1.0) == vb.crop_box


def test_views_deterministic_and_in_scale_range():
    scene = generate_scene(SceneConfig(), 0)
    for seed in range(50):
        va, vb = sample_views(scene, 0.25, 1.0, seed=seed)
        again = sample_views(scene, 0.25, 1.0, seed=seed)
        assert va.crop_box == again[0].crop_box and vb.crop_box == again[1].crop_box
        for v in (va, vb):
            x0, y0, x1, y1 = v.crop_box
            assert 0.25 - 1e-12 <= (x1 - x0) * (y1 - y0) <= 1.0 + 1e-12
            assert v.pixels.shape == (64, 64, 4)


def test_view_crop_matches_source_and_flip():
    scene = generate_scene(SceneConfig(), 1)
    v = View(np.zeros((64, 64, 1)), (0.0, 0.0, 1.0, 1.0), True, (8, 8))
    assert np.array_equal(v.crop(scene.class_mask), scene.class_mask[:, ::-1])
    # token positions are mirrored too
    pos = v.token_positions().reshape(8, 8, 2)
    assert pos[0, 0, 0] > pos[0, -1, 0]


def test_view_rejects_bad_geometry():
    with pytest.raises(ValueError):
        View(np.zeros((64, 64, 1)), (0.5, 0.0, 0.4, 1.0), False, (8, 8))
    with pytest.raises(ValueError):
        View(np.zeros((64, 64, 1)), (0.0, 0.0, 1.0, 1.0), False, (7, 8))


def test_sparse_full_fill_equals_dense():
    scene = generate_scene(SceneConfig(), 2)
    for pattern in ("uniform", "scanline"):
        sparse = sample_sparse_depth(scene, 1.0, pattern, seed=0)
        assert sparse.fill_fraction == 1.0
        assert np.array_equal(sparse.to_dense(), scene.depth_map)


def test_sparse_exact_count():
    scene = generate_scene(SceneConfig(), 2)
    H, W = scene.depth_map.shape
    sparse = sample_sparse_depth(scene, 0.05, "uniform", seed=1)
    assert len(sparse.values) == round(0.05 * H * W)
    assert np.array_equal(sparse.values, scene.depth_map[sparse.coords[:, 0], sparse.coords[:, 1]])


def test_scanline_rows():
    scene = generate_scene(SceneConfig(), 2)
    sparse = sample_sparse_depth(scene, 0.05, "scanline", seed=1, row_step=8)
    assert (sparse.coords[:, 0] % 8 == 0).all()


def test_sparse_rejects_bad_input():
    scene = generate_scene(SceneConfig(), 2)
    for f in (0.0, 1.5):
        with pytest.raises(ValueError):
            sample_sparse_depth(scene, f)
    with pytest.raises(ValueError):
        sample_sparse_depth(scene, 0.5, "scanline")
    with pytest.raises(ValueError):
        SparseDepthMap([[0, 0], [0, 0]], [1.0, 2.0], (4, 4))
    with pytest.raises(ValueError):
        SparseDepthMap([[5, 0]], [1.0], (4, 4))
    with pytest.raises(ValueError):
        SparseDepthMap([[0, 0]], [-1.0], (4, 4))
