"""Point cloud types, crop/merge/resample and the augmentation pipeline."""

import numpy as np
import pytest

from r3d.pointcloud import (
    Aabb,
    AugmentConfig,
    PointCloud,
    RigidTransform,
    augment,
    color_jitter,
    crop_workspace,
    farthest_point_sample,
    knn_group,
    merge_views,
    resample_to_fixed,
)
from r3d.rng import Rng


def random_cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.random((n, 3), dtype=np.float32) - 0.5, rng.random((n, 3), dtype=np.float32))


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0, 0]]), np.zeros((1, 3)))
    c = PointCloud(np.zeros((2, 3)), np.array([[1.5, -0.5, 0.5]] * 2))
    assert c.colors.min() >= 0.0 and c.colors.max() <= 1.0  # clamped


def test_rigid_transform_validation_and_apply():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # reflection
    tf = RigidTransform.identity()
    pts = np.array([[1.0, 2.0, 3.0]], np.float32)
    assert np.allclose(tf.apply(pts), pts)


def test_aabb_inclusive_contains():
    box = Aabb([0, 0, 0], [1, 1, 1])
    inside = box.contains(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.5, 0.5, 1.0001]]))
    assert inside.tolist() == [True, True, False]
    with pytest.raises(ValueError):
        Aabb([1, 0, 0], [0, 1, 1])


def test_crop_preserves_order_and_may_empty():
    pts = np.array([[0.5, 0.5, 0.5], [2, 2, 2], [0.1, 0.1, 0.1]], np.float32)
    cloud = PointCloud(pts, np.zeros_like(pts))
    box = Aabb([0, 0, 0], [1, 1, 1])
    out = crop_workspace(cloud, box)
    assert np.allclose(out.points, [[0.5, 0.5, 0.5], [0.1, 0.1, 0.1]])
    empty = crop_workspace(cloud, Aabb([5, 5, 5], [6, 6, 6]))
    assert empty.n_points == 0


def test_merge_views_rotates_and_concats_in_order():
    a = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.full((1, 3), 0.25))
    b = PointCloud(np.array([[0.0, 1.0, 0.0]]), np.full((1, 3), 0.75))
    rot90z = RigidTransform(np.array([[0.0, -1.0, 0], [1.0, 0.0, 0], [0, 0, 1.0]]), [0, 0, 1.0])
    merged = merge_views([a, b], [RigidTransform.identity(), rot90z])
    assert np.allclose(merged.points, [[1, 0, 0], [-1, 0, 1]], atol=1e-6)
    assert np.allclose(merged.colors[:, 0], [0.25, 0.75])
    with pytest.raises(ValueError):
        merge_views([a], [])


def test_resample_identity_when_equal():
    cloud = random_cloud(64)
    out = resample_to_fixed(cloud, 64, Rng(0))
    assert np.array_equal(out.points, cloud.points)
    assert np.array_equal(out.colors, cloud.colors)


def test_resample_pads_by_duplicating():
    cloud = random_cloud(10, seed=1)
    out = resample_to_fixed(cloud, 25, Rng(1))
    assert out.n_points == 25
    assert np.array_equal(out.points[:10], cloud.points)
    # every padded row is a copy of some original row
    for row in out.points[10:]:
        assert (row == cloud.points).all(axis=1).any()


def test_resample_downsamples_with_fps():
    cloud = random_cloud(100, seed=2)
    out = resample_to_fixed(cloud, 40, Rng(2))
    assert out.n_points == 40
    joined = {tuple(r) for r in cloud.points.tolist()}
    assert all(tuple(r) in joined for r in out.points.tolist())
    assert len({tuple(r) for r in out.points.tolist()}) == 40  # distinct picks


def test_resample_empty_raises():
    empty = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        resample_to_fixed(empty, 8, Rng(0))


def test_fps_knn_entry_points_delegate():
    cloud = random_cloud(32, seed=3)
    idx = farthest_point_sample(cloud, 8, 0)
    assert idx[0] == 0 and len(set(idx.tolist())) == 8
    groups = knn_group(cloud, idx, 4)
    assert groups.shape == (8, 4)
    assert np.array_equal(groups[:, 0], idx)  # nearest neighbour of a distinct point is itself


def test_color_jitter_formula_and_clamp():
    colors = np.full((4, 3), 0.95, np.float32)
    out = color_jitter(colors, 0.125, 1.0, 1.0)
    assert np.allclose(out, 1.0)  # 0.95 + 0.125 clamps to 1
    colors2 = np.array([[0.2, 0.4, 0.9]], np.float32)
    gray = colors2.mean()
    want = np.clip(((colors2 - gray) * 1.2 + gray - 0.5) * 0.7 + 0.5 - 0.05, 0, 1)
    assert np.allclose(color_jitter(colors2, -0.05, 0.7, 1.2), want, atol=1e-6)


def test_augment_identity_config_is_bit_exact_noop():
    cloud = random_cloud(128, seed=4)
    proprio = np.array([0.1, -0.2, 0.3, 0.0], np.float32)
    out, q = augment(cloud, proprio, AugmentConfig.identity(), Rng(5))
    assert np.array_equal(out.points, cloud.points)
    assert np.array_equal(out.colors, cloud.colors)
    assert np.array_equal(q, proprio)


def test_augment_permutation_only_preserves_multiset():
    cloud = random_cloud(64, seed=5)
    cfg = AugmentConfig((0, 0), (1, 1), (1, 1), 0.0, 0.0, 0.0, True)
    out, _ = augment(cloud, np.zeros(4, np.float32), cfg, Rng(6))
    a = np.sort(cloud.as_array(), axis=0)
    b = np.sort(out.as_array(), axis=0)
    assert np.array_equal(a, b)


def test_augment_dropout_pinned_ratio():
    cloud = random_cloud(1024, seed=6)

    class PinnedHalf(Rng):
        def uniform(self, low=0.0, high=1.0, size=None):
            if size is None and low == 0.0 and high == 0.5:
                return 0.5
            return super().uniform(low, high, size)

    cfg = AugmentConfig((0, 0), (1, 1), (1, 1), 0.0, 0.0, 0.5, False)
    out, _ = augment(cloud, np.zeros(4, np.float32), cfg, PinnedHalf(7))
    assert out.n_points == 1024
    original = {tuple(r) for r in cloud.points.tolist()}
    survivors = {tuple(r) for r in out.points[:512].tolist()}
    assert len(survivors) == 512 and survivors <= original
    padded = [tuple(r) for r in out.points[512:].tolist()]
    assert all(p in survivors for p in padded)  # pads duplicate survivors


def test_augment_randomized_properties():
    cfg = AugmentConfig()
    rngs = Rng(8).split(100)
    cloud = random_cloud(256, seed=7)
    proprio = np.zeros(4, np.float32)
    for r in rngs:
        out, q = augment(cloud, proprio, cfg, r)
        assert out.n_points == 256
        assert out.colors.min() >= 0.0 and out.colors.max() <= 1.0
        assert np.isfinite(out.points).all() and np.isfinite(q).all()


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(brightness_range=(0.2, -0.2))
    with pytest.raises(ValueError):
        AugmentConfig(coord_noise_sigma=-1.0)
    with pytest.raises(ValueError):
        AugmentConfig(dropout_max_ratio=1.0)
