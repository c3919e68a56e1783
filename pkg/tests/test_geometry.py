import numpy as np
import pytest

from scenemotion.geometry import (AABB, SceneCloud, TeacherView, TeacherViewSet, ViewProjection, aabb_of,
                                  farthest_point_sample, fuse_multiview, knn_indices, knn_pool, project_points)


def test_fps_line():
    coords = np.array([[0.0, 0, 0], [1, 0, 0], [10, 0, 0]])
    assert farthest_point_sample(coords, 2, 0).tolist() == [0, 2]


def test_fps_all_points():
    coords = np.random.default_rng(0).normal(size=(7, 3))
    idx = farthest_point_sample(coords, 7, 3)
    assert sorted(idx.tolist()) == list(range(7)) and idx[0] == 3


def test_fps_square_corners_skip_center():
    coords = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.5, 0]])
    idx = farthest_point_sample(coords, 4, 0)
    assert sorted(idx.tolist()) == [0, 1, 2, 3]


def test_fps_tie_lowest_index():
    coords = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0]])
    assert farthest_point_sample(coords, 2, 0).tolist() == [0, 1]


def test_fps_rejects_oversampling():
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((3, 3)), 4)


def test_knn_pool_k1_and_constant():
    rng = np.random.default_rng(1)
    coords = rng.normal(size=(20, 3))
    feats = rng.normal(size=(20, 4))
    centers = coords[[3, 7]] + 1e-6
    assert np.allclose(knn_pool(coords, feats, centers, 1), feats[[3, 7]])
    assert np.allclose(knn_pool(coords, np.full((20, 4), 2.5), centers, 5), 2.5)


def test_knn_pool_mean_of_two():
    coords = np.array([[0.0, 0, 0], [1, 0, 0], [5, 0, 0]])
    feats = np.array([[0.0], [2.0], [9.0]])
    assert knn_pool(coords, feats, np.array([[0.4, 0, 0]]), 2)[0, 0] == 1.0


def test_knn_rejects_large_k():
    with pytest.raises(ValueError):
        knn_pool(np.zeros((3, 3)), np.zeros((3, 1)), np.zeros((1, 3)), 4)


def test_knn_indices_match_brute_force_with_ties():
    rng = np.random.default_rng(2)
    coords = rng.integers(0, 4, size=(200, 3)).astype(float)   # many exact ties
    centers = rng.integers(0, 4, size=(30, 3)).astype(float)
    got = knn_indices(coords, centers, 6)
    for r, c in enumerate(centers):
        d = np.sum((coords - c) ** 2, axis=1)
        assert got[r].tolist() == np.lexsort((np.arange(200), d))[:6].tolist()


def test_projection_examples():
    s = 10.0
    view = ViewProjection(np.array([[s, 0], [0, s], [0, 0]]), np.zeros(2), (100, 100))
    pix, valid = project_points(np.array([[1.0, 2.0, 0.5], [-0.1, 0, 0]]), view)
    assert pix[0].tolist() == [10, 20] and valid.tolist() == [True, False]
    view = ViewProjection(np.zeros((3, 2)), np.array([4.0, 5.0]), (8, 8))
    pix, valid = project_points(np.random.default_rng(0).normal(size=(6, 3)), view)
    assert valid.all() and (pix == [4, 5]).all()


def _cloud(coords, inst):
    n = len(coords)
    return SceneCloud(np.asarray(coords, float), np.zeros((n, 3)), np.asarray(inst), np.zeros(n, dtype=int))


def _view(instance_map, features):
    h, w = instance_map.shape
    proj = ViewProjection(np.array([[1.0, 0], [0, 1.0], [0, 0]]), np.zeros(2), (h, w))
    return TeacherView(proj, instance_map, features)


def test_fuse_single_and_double_view():
    cloud = _cloud([[1.0, 1.0, 0.0]], [2])
    imap = np.full((3, 3), 2)
    f = np.random.default_rng(0).normal(size=(3, 3, 4))
    f[1, 1] = [0.1, 0.2, 0.3, 0.4]
    t, cov = fuse_multiview(cloud, TeacherViewSet((_view(imap, f),)))
    assert cov[0] and np.array_equal(t[0], f[1, 1])
    t, cov = fuse_multiview(cloud, TeacherViewSet((_view(imap, f), _view(imap, f))))
    assert np.array_equal(t[0], f[1, 1])


def test_fuse_occluded_point_uncovered():
    cloud = _cloud([[1.0, 1.0, 0.0]], [2])
    imap = np.full((3, 3), 5)      # another instance in front
    t, cov = fuse_multiview(cloud, TeacherViewSet((_view(imap, np.ones((3, 3, 2))),)))
    assert not cov[0] and np.all(t[0] == 0)


def test_aabb_examples():
    p = np.array([[0.5, -1.0, 2.0]])
    box = aabb_of(p)
    assert np.array_equal(box.min_corner, p[0]) and np.array_equal(box.max_corner, p[0])
    box = aabb_of(np.array([[1.0, 2, 3], [0, 0, 0]]))
    assert box.min_corner.tolist() == [0, 0, 0] and box.max_corner.tolist() == [1, 2, 3]
    pts = np.random.default_rng(3).normal(size=(10, 3))
    a, b = aabb_of(pts), aabb_of(pts[::-1])
    assert np.array_equal(a.as_vector(), b.as_vector())
    assert np.allclose(AABB(np.zeros(3), np.full(3, 2.0)).center, 1.0)


def test_scene_cloud_validation():
    with pytest.raises(ValueError):
        SceneCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    with pytest.raises(ValueError):
        SceneCloud(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros(2), np.zeros(2))
    c = _cloud([[0.0, 0, 0], [1, 1, 1]], [3, 4])
    assert c.with_goal(4).goal_mask.tolist() == [False, True]
    with pytest.raises(ValueError):
        c.with_goal(9)
