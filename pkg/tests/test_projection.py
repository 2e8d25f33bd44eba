"""Scan unfolding, projection bookkeeping, resizing, kNN back-projection."""

import numpy as np
import pytest

from lidarpan import ShapeError, ValidationError
from lidarpan.pcl_io import LabelSet, PointCloud
from lidarpan.projection import (
    ProjectionConfig,
    backproject_knn,
    column_index,
    project,
    resize_for_network,
    unfold_rows,
)
from lidarpan.synthetic import inject_occlusions, ring_cloud


def cloud_from_yaws(yaws_deg, r=10.0):
    phi = np.radians(((np.asarray(yaws_deg) + 180.0) % 360.0) - 180.0)
    pts = np.stack([r * np.cos(phi), r * np.sin(phi),
                    np.zeros_like(phi), np.full_like(phi, 0.5)], axis=1)
    return PointCloud(pts.astype(np.float32))


def test_unfold_two_rings():
    ring = np.linspace(350.0, 10.0, 8)
    cloud = cloud_from_yaws(np.concatenate([ring, ring]))
    rows = unfold_rows(cloud, 310.0)
    assert np.array_equal(rows, [0] * 8 + [1] * 8)


def test_unfold_single_ring_no_wrap():
    cloud = cloud_from_yaws(np.linspace(350.0, 10.0, 16))
    assert np.all(unfold_rows(cloud, 310.0) == 0)


def test_unfold_fires_on_near_full_jump():
    cloud = cloud_from_yaws([359.5, 0.5])
    assert np.array_equal(unfold_rows(cloud, 310.0), [0, 1])


def test_unfold_row_overflow_reports_point_index():
    ring = np.linspace(350.0, 10.0, 4)
    cloud = cloud_from_yaws(np.concatenate([ring, ring, ring]))
    with pytest.raises(ValidationError) as exc:
        unfold_rows(cloud, 310.0, max_rows=2)
    assert exc.value.details["point_index"] == 8


def test_column_index_formula_points():
    assert column_index(0.0, 2048) == 1024
    assert column_index(np.pi, 2048) == 0
    assert column_index(-np.pi, 2048) == 2047  # formula gives W, clamped


def test_column_index_non_increasing_in_phi():
    phi = np.linspace(-np.pi, np.pi, 500)
    cols = column_index(phi, 128)
    assert np.all(np.diff(cols) <= 0)


def test_project_single_point():
    cloud = PointCloud(np.array([[10.0, 0.0, 0.0, 0.3]], dtype=np.float32))
    img, _ = project(cloud, ProjectionConfig(width=64, rows=4))
    assert img.valid.sum() == 1
    r, c = img.pixel_of_point[0]
    assert img.channels[0, r, c] == pytest.approx(10.0)
    assert img.channels[2, r, c] == pytest.approx(10.0)
    assert img.channels[1, r, c] == pytest.approx(0.3)
    assert img.point_of_pixel[r, c] == 0


def test_project_collision_nearest_wins():
    # Same yaw, same ring: ranges 9 then 5; the range-5 point takes the pixel.
    pts = np.array([[9.0, 0.0, 0.0, 0.1],
                    [5.0, 0.0, 0.0, 0.9]], dtype=np.float32)
    cloud = PointCloud(pts)
    labels = LabelSet(np.array([1, 2]), np.array([10, 20]))
    img, (sem2d, inst2d) = project(cloud, ProjectionConfig(width=32, rows=4), labels)
    assert np.array_equal(img.pixel_of_point[0], img.pixel_of_point[1])
    r, c = img.pixel_of_point[0]
    assert img.channels[0, r, c] == pytest.approx(5.0)
    assert img.point_of_pixel[r, c] == 1
    assert sem2d[r, c] == 2 and inst2d[r, c] == 20
    assert img.valid.sum() == 1


def test_project_empty_cloud_all_invalid():
    img, _ = project(PointCloud(np.zeros((0, 4), dtype=np.float32)),
                     ProjectionConfig(width=16, rows=4))
    assert not img.valid.any()
    assert np.all(img.channels == 0)
    assert np.all(img.point_of_pixel == -1)


def test_project_roundtrip_ranges_exact():
    cloud, _, rows, cols = ring_cloud(num_rings=6, width=64, points_per_ring=10, seed=3)
    img, _ = project(cloud, ProjectionConfig(width=64, rows=6))
    assert np.array_equal(img.pixel_of_point[:, 0], rows)
    assert np.array_equal(img.pixel_of_point[:, 1], cols)
    got = img.channels[0, rows, cols]
    assert np.array_equal(got, cloud.ranges)


def test_projected_range_matches_norm():
    cloud, _, _, _ = ring_cloud(num_rings=6, width=64, seed=9)
    img, _ = project(cloud, ProjectionConfig(width=64, rows=6))
    r = img.channels[0][img.valid]
    norm = np.sqrt((img.channels[2:, img.valid].astype(np.float64) ** 2).sum(axis=0))
    assert np.allclose(r, norm, rtol=1e-4)


def test_resize_identity():
    cloud, labels, _, _ = ring_cloud(num_rings=4, width=32, seed=1)
    img, maps = project(cloud, ProjectionConfig(width=32, rows=4), labels)
    out, maps2 = resize_for_network(img, 4, 32, maps)
    assert np.allclose(out.channels, img.channels)
    assert np.array_equal(out.valid, img.valid)
    assert np.array_equal(maps2[0], maps[0])


def test_resize_constant_channels_and_range_nonnegative():
    img_channels = np.full((5, 8, 16), 3.25, dtype=np.float32)
    from lidarpan.projection import RangeImage
    img = RangeImage(img_channels, np.ones((8, 16), bool),
                     np.zeros((0, 2), np.int64), np.zeros((8, 16), np.int64))
    out, _ = resize_for_network(img, 32, 64)
    assert np.allclose(out.channels, 3.25, atol=1e-6)
    assert np.all(out.channels[0] >= 0)


def test_resize_up_then_down_preserves_piecewise_labels():
    rng = np.random.default_rng(0)
    sem = np.repeat(np.repeat(rng.integers(0, 5, (4, 16)), 16, axis=0), 4, axis=1)
    inst = np.zeros_like(sem)
    from lidarpan.projection import RangeImage
    h, w = sem.shape
    img = RangeImage(np.zeros((5, h, w), np.float32), np.ones((h, w), bool),
                     np.zeros((0, 2), np.int64), np.zeros((h, w), np.int64))
    up, up_maps = resize_for_network(img, h * 4, w * 4, (sem, inst))
    _, down_maps = resize_for_network(
        RangeImage(np.zeros((5, h * 4, w * 4), np.float32), np.ones((h * 4, w * 4), bool),
                   np.zeros((0, 2), np.int64), np.zeros((h * 4, w * 4), np.int64)),
        h, w, up_maps)
    assert np.array_equal(down_maps[0], sem)


def test_resize_zero_target_rejected():
    cloud, _, _, _ = ring_cloud(num_rings=4, width=32, seed=1)
    img, _ = project(cloud, ProjectionConfig(width=32, rows=4))
    with pytest.raises(ShapeError):
        resize_for_network(img, 0, 32)


def test_backproject_identity_k1():
    cloud, labels, _, _ = ring_cloud(num_rings=8, width=64, points_per_ring=14, seed=5)
    cfg = ProjectionConfig(width=64, rows=8)
    img, maps = project(cloud, cfg, labels)
    out = backproject_knn(maps, img, cloud, k=1, window=(1, 1), ignore_id=99)
    assert np.array_equal(out.semantic, labels.semantic)
    assert np.array_equal(out.instance, labels.instance)


def test_backproject_occluded_points_inherit_k1():
    cloud, labels, _, _ = ring_cloud(num_rings=4, width=64, points_per_ring=8, seed=6)
    cloud2, labels2, occluded = inject_occlusions(cloud, labels, count=3, seed=7,
                                                  occluded_class=4)
    cfg = ProjectionConfig(width=64, rows=4)
    img, maps = project(cloud2, cfg, labels2)
    out = backproject_knn(maps, img, cloud2, k=1, window=(1, 1), ignore_id=99)
    # both colliding points receive the winning (nearer) point's label
    occ_idx = np.where(occluded)[0]
    for i in occ_idx:
        assert out.semantic[i] == labels2.semantic[i - 1]
        assert out.instance[i] == labels2.instance[i - 1]


def test_backproject_majority_vote():
    # Build a 1x3 image by hand: labels {A, A, B}; the query point's range
    # is nearest to the B pixel, but majority A must win with k=3.
    from lidarpan.projection import RangeImage
    sem2d = np.array([[1, 1, 2]])
    inst2d = np.array([[0, 0, 0]])
    channels = np.zeros((5, 1, 3), dtype=np.float32)
    channels[0] = [[10.2, 10.3, 10.0]]
    img = RangeImage(channels, np.ones((1, 3), bool),
                     np.array([[0, 1]]), np.array([[0, 0, 0]]))
    pts = np.array([[10.0, 0.0, 0.0, 0.0]], dtype=np.float32)
    out = backproject_knn((sem2d, inst2d), img, PointCloud(pts),
                          k=3, window=(1, 3), ignore_id=9)
    assert out.semantic[0] == 1


def test_backproject_tie_breaks_by_range_difference():
    from lidarpan.projection import RangeImage
    sem2d = np.array([[1, 2, 1, 2]])
    inst2d = np.zeros((1, 4), dtype=np.int64)
    channels = np.zeros((5, 1, 4), dtype=np.float32)
    channels[0] = [[10.4, 10.1, 10.6, 10.9]]
    img = RangeImage(channels, np.ones((1, 4), bool),
                     np.array([[0, 1]]), np.zeros((1, 4), np.int64))
    pts = np.array([[10.0, 0.0, 0.0, 0.0]], dtype=np.float32)
    # 2-2 tie between classes; class 2 holds the closest candidate (10.1)
    out = backproject_knn((sem2d, inst2d), img, PointCloud(pts),
                          k=4, window=(1, 7), ignore_id=9)
    assert out.semantic[0] == 2


def test_backproject_no_candidates_ignore():
    from lidarpan.projection import RangeImage
    img = RangeImage(np.zeros((5, 2, 2), np.float32), np.zeros((2, 2), bool),
                     np.array([[0, 0]]), np.full((2, 2), -1, np.int64))
    pts = np.array([[5.0, 0.0, 0.0, 0.0]], dtype=np.float32)
    out = backproject_knn((np.ones((2, 2), np.int64), np.zeros((2, 2), np.int64)),
                          img, PointCloud(pts), k=1, window=(1, 1), ignore_id=42)
    assert out.semantic[0] == 42
    assert out.instance[0] == 0


def test_backproject_k_window_validation():
    cloud, labels, _, _ = ring_cloud(num_rings=4, width=32, seed=2)
    img, maps = project(cloud, ProjectionConfig(width=32, rows=4), labels)
    with pytest.raises(ValidationError):
        backproject_knn(maps, img, cloud, k=10, window=(3, 3))
    with pytest.raises(ValidationError):
        backproject_knn(maps, img, cloud, k=1, window=(2, 3))
