import math

import numpy as np
import pytest

from semisdf import geometry as geo
from semisdf.errors import ConfigurationError, ShapeError


def _primitives():
    return [
        geo.sphere(0.5, (0.1, -0.05, 0.0)),
        geo.box((0.3, 0.2, 0.4), (0.0, 0.1, -0.1)),
        geo.torus(0.5, 0.2),
        geo.capsule(0.25, 0.3, (0.05, 0.0, 0.0)),
        geo.cylinder(0.3, 0.35),
    ]


class TestExactSdf:
    def test_sphere_outside(self):
        assert geo.exact_sdf(geo.sphere(0.5), [1.0, 0.0, 0.0])[0] == 0.5

    def test_torus_tube_center(self):
        assert geo.exact_sdf(geo.torus(0.5, 0.2), [0.5, 0.0, 0.0])[0] == pytest.approx(-0.2, abs=1e-15)

    def test_box_center(self):
        assert geo.exact_sdf(geo.box((0.3, 0.3, 0.3)), [0.0, 0.0, 0.0])[0] == pytest.approx(-0.3, abs=1e-15)

    def test_capsule_and_cylinder_values(self):
        cap = geo.capsule(0.2, 0.3)
        assert geo.exact_sdf(cap, [0.0, 0.8, 0.0])[0] == pytest.approx(0.3)
        assert geo.exact_sdf(cap, [0.5, 0.1, 0.0])[0] == pytest.approx(0.3)
        cyl = geo.cylinder(0.3, 0.4)
        assert geo.exact_sdf(cyl, [0.0, 0.0, 0.0])[0] == pytest.approx(-0.3)
        assert geo.exact_sdf(cyl, [0.6, 0.8, 0.0])[0] == pytest.approx(0.5)

    def test_scale_and_translation(self):
        s = geo.ShapeInstance("sphere", {"radius": 0.5}, (0.2, 0.0, 0.0), 0.5)
        # world radius 0.25 around (0.2, 0, 0)
        assert geo.exact_sdf(s, [0.7, 0.0, 0.0])[0] == pytest.approx(0.25)

    def test_union_is_min_and_flagged(self):
        a, b = geo.sphere(0.2, (-0.5, 0, 0)), geo.sphere(0.2, (0.5, 0, 0))
        u = geo.union([a, b])
        x = np.random.default_rng(0).uniform(-1, 1, (100, 3))
        np.testing.assert_array_equal(geo.exact_sdf(u, x), np.minimum(geo.exact_sdf(a, x), geo.exact_sdf(b, x)))
        assert u.approximate and not a.approximate

    def test_unknown_family(self):
        with pytest.raises(ConfigurationError):
            geo.ShapeInstance("cone", {"radius": 1.0})

    def test_vectorized_shape(self):
        x = np.zeros((7, 3))
        assert geo.exact_sdf(geo.sphere(0.5), x).shape == (7,)

    @pytest.mark.parametrize("shape", _primitives(), ids=lambda s: s.family)
    def test_lipschitz(self, shape):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(-1, 1, (10000, 3)), rng.uniform(-1, 1, (10000, 3))
        lhs = np.abs(geo.exact_sdf(shape, a) - geo.exact_sdf(shape, b))
        assert np.all(lhs <= np.linalg.norm(a - b, axis=1) * (1 + 1e-9))

    def test_sign_consistency(self):
        s = geo.sphere(0.5)
        rng = np.random.default_rng(2)
        inside = geo._unit_vectors(rng, 200) * rng.uniform(0, 0.49, (200, 1))
        outside = geo._unit_vectors(rng, 200) * rng.uniform(0.51, 1.0, (200, 1))
        assert np.all(geo.exact_sdf(s, inside) < 0) and np.all(geo.exact_sdf(s, outside) > 0)

    def test_round_trip_dict(self):
        u = geo.union([geo.capsule(0.1, 0.3), geo.box((0.3, 0.1, 0.3), (0, 0.5, 0))], "stand")
        assert geo.ShapeInstance.from_dict(u.to_dict()) == u


class TestSampleSurface:
    def test_sphere_on_surface(self):
        pts = geo.sample_surface(geo.sphere(0.5), 1000, seed=7)
        assert pts.shape == (1000, 3)
        assert np.max(np.abs(np.linalg.norm(pts, axis=1) - 0.5)) <= 1e-6

    @pytest.mark.parametrize("shape", _primitives() + [geo.union([geo.capsule(0.15, 0.35),
                                                               geo.box((0.3, 0.12, 0.3), (0, 0.5, 0))])],
                             ids=lambda s: s.family)
    def test_points_on_surface(self, shape):
        pts = geo.sample_surface(shape, 2000, seed=3)
        assert np.max(np.abs(geo.exact_sdf(shape, pts))) <= 1e-6

    def test_deterministic(self):
        s = geo.torus(0.5, 0.2)
        np.testing.assert_array_equal(geo.sample_surface(s, 500, 11), geo.sample_surface(s, 500, 11))
        assert not np.array_equal(geo.sample_surface(s, 500, 11), geo.sample_surface(s, 500, 12))

    def test_box_face_counts_proportional_to_area(self):
        b = (0.2, 0.4, 0.6)
        pts = geo.sample_surface(geo.box(b), 10000, seed=5)
        counts = []
        for axis in range(3):
            counts.append(np.sum(np.isclose(np.abs(pts[:, axis]), b[axis], atol=1e-12)))
        areas = np.array([b[1] * b[2], b[0] * b[2], b[0] * b[1]])
        expected = 10000 * areas / areas.sum()
        np.testing.assert_allclose(counts, expected, rtol=0.05)

    def test_torus_area_uniform(self):
        # outer half of the tube (cos v > 0) carries (pi R + 2 r) / (2 pi R) of the area
        R, r = 0.5, 0.2
        pts = geo.sample_surface(geo.torus(R, r), 20000, seed=9)
        outer = np.hypot(pts[:, 0], pts[:, 2]) > R
        expected = (math.pi * R + 2 * r) / (2 * math.pi * R)
        sd = math.sqrt(expected * (1 - expected) / 20000)
        assert abs(outer.mean() - expected) < 4 * sd

    def test_degenerate_parameters(self):
        with pytest.raises(ShapeError):
            geo.sample_surface(geo.sphere(0.0), 10, 0)
        with pytest.raises(ShapeError):
            geo.sample_surface(geo.torus(0.2, 0.3), 10, 0)

    def test_bad_count(self):
        with pytest.raises(ValueError):
            geo.sample_surface(geo.sphere(0.5), 0, 0)

    def test_allocate_counts(self):
        c = geo.allocate_counts(10, [1, 1, 1])
        assert c.sum() == 10 and sorted(c.tolist()) == [3, 3, 4]


class TestNearestNeighbor:
    def test_two_point_cloud(self):
        tree = geo.KdTree([[0, 0, 0], [1, 0, 0]])
        t, d, i = geo.nearest_neighbor(tree, [0.4, 0, 0])
        np.testing.assert_array_equal(t, [0, 0, 0])
        assert d == pytest.approx(0.4) and i == 0

    def test_identity(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        t, d, i = geo.nearest_neighbor(geo.KdTree(pts), pts[17])
        assert d == 0.0 and i == 17

    def test_tie_goes_to_lowest_index(self):
        pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
        _, d, i = geo.KdTree(pts).query(np.zeros((1, 3)))
        assert i[0] == 0 and d[0] == 1.0
        _, _, i2 = geo.linear_scan(pts, np.zeros((1, 3)))
        assert i2[0] == 0

    @pytest.mark.parametrize("n", [1, 2, 5, 500, 2000])
    def test_matches_linear_scan(self, n):
        rng = np.random.default_rng(n)
        pts = rng.uniform(-1, 1, (n, 3))
        q = rng.uniform(-1.2, 1.2, (100, 3))
        a = geo.KdTree(pts).query(q)
        b = geo.linear_scan(pts, q)
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_matches_linear_scan_on_lattice_ties(self):
        # integer lattice: many exact distance ties
        g = np.arange(6, dtype=float)
        pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
        q = np.random.default_rng(1).integers(0, 10, (100, 3)) * 0.5
        a = geo.KdTree(pts, leaf_size=4).query(q)
        b = geo.linear_scan(pts, q)
        np.testing.assert_array_equal(a[2], b[2])
        np.testing.assert_array_equal(a[1], b[1])

    def test_empty_cloud(self):
        with pytest.raises(ValueError):
            geo.KdTree(np.zeros((0, 3)))

    def test_tree_is_immutable(self):
        tree = geo.KdTree(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            tree.points[0, 0] = 1.0


class TestSampleQueries:
    def test_labels_exact_on_sphere(self):
        s = geo.sphere(0.5)
        cloud = geo.sample_surface(s, 500, 0)
        q = geo.sample_queries(s, cloud, 300, 100, 0.05, seed=1)
        assert isinstance(q, geo.LabeledQueryBatch)
        np.testing.assert_array_equal(q.gt_sdf, np.linalg.norm(q.x, axis=1) - 0.5)
        assert np.all(np.abs(q.gt_sdf) <= 2 * math.sqrt(3))

    def test_nn_annotations(self):
        s = geo.box((0.3, 0.3, 0.3))
        cloud = geo.sample_surface(s, 400, 0)
        q = geo.sample_queries(s, cloud, 50, 50, seed=2, with_labels=False)
        assert not hasattr(q, "gt_sdf")
        np.testing.assert_array_equal(q.nn, cloud[q.nn_index])
        np.testing.assert_array_equal(q.nn_dist, geo.point_distance(q.x, q.nn))
        for sample in q:
            assert sample.gt_sdf is None and sample.nn is not None

    def test_uniform_inside_fraction_matches_volume(self):
        s = geo.sphere(0.6)
        cloud = geo.sample_surface(s, 100, 0)
        n = 4000
        q = geo.sample_queries(s, cloud, 0, n, seed=3)
        p = geo.volume(s) / 8.0
        frac = np.mean(q.gt_sdf < 0)
        assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / n)

    def test_near_noise_scale(self):
        s = geo.sphere(0.5)
        cloud = geo.sample_surface(s, 2000, 0)
        q = geo.sample_queries(s, cloud, 20000, 0, sigma_near=0.05, seed=4)
        # |offset| of isotropic 3D Gaussian has mean sigma * sqrt(8 / pi)
        mean_offset = np.mean(np.linalg.norm(q.x - cloud[_anchor_indices(q, cloud)], axis=1))
        assert mean_offset == pytest.approx(0.05 * math.sqrt(8 / math.pi), rel=0.05)

    def test_errors(self):
        s = geo.sphere(0.5)
        with pytest.raises(ValueError):
            geo.sample_queries(s, np.zeros((0, 3)), 1, 1)
        with pytest.raises(ValueError):
            geo.sample_queries(s, np.zeros((1, 3)), 0, 0)
        with pytest.raises(ValueError):
            geo.sample_queries(s, np.zeros((1, 3)), 1, 0, sigma_near=0.0)

    def test_unlabeled_view_and_take(self):
        s = geo.sphere(0.5)
        q = geo.sample_queries(s, geo.sample_surface(s, 100, 0), 10, 5, seed=0)
        sub = q.take(np.array([0, 3]))
        assert len(sub) == 2 and sub.gt_sdf[1] == q.gt_sdf[3]
        assert type(q.unlabeled()) is geo.QueryBatch
        np.testing.assert_array_equal(q.signs(), np.where(q.gt_sdf >= 0, 1.0, -1.0))


def _anchor_indices(q, cloud):
    # replay the anchor draw of sample_queries (seed 4)
    rng = np.random.default_rng(4)
    return rng.integers(0, len(cloud), len(q))


class TestNormalize:
    def test_recenter_and_normalize(self):
        pts = np.random.default_rng(0).uniform([1, 2, 3], [3, 3, 4], (100, 3))
        out, center, scale = geo.recenter_and_normalize(pts, extent=0.9)
        assert np.max(np.abs(out)) == pytest.approx(0.9)
        np.testing.assert_allclose(out * scale + center, pts, atol=1e-12)
