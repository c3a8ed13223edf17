import numpy as np
import pytest

from semisdf import geometry as geo
from semisdf.errors import EvaluationError, NumericError
from semisdf.model import ConditionalSdfModel, DecoderConfig, EncoderConfig
from semisdf.reconstruction import (GridField, TriangleMesh, evaluate_grid, export_mesh,
                                    field_from_function, grid_nodes, import_mesh, load_grid,
                                    marching_cubes, save_grid)


def _sdf_grid(shape, res):
    return field_from_function(lambda p: geo.exact_sdf(shape, p), res)


@pytest.fixture(scope="module")
def sphere_mesh():
    return marching_cubes(_sdf_grid(geo.sphere(0.5), 64))


class TestGrid:
    def test_nodes_layout(self):
        nodes = grid_nodes(3)
        assert nodes.shape == (27, 3)
        assert np.array_equal(nodes[0], [-1, -1, -1]) and np.array_equal(nodes[1], [-1, -1, 0])
        assert np.array_equal(nodes[9], [0, -1, -1])

    def test_field_matches_pointwise(self):
        shape = geo.torus(0.5, 0.2)
        g = _sdf_grid(shape, 9)
        assert np.array_equal(g.values.reshape(-1), geo.exact_sdf(shape, grid_nodes(9)))
        assert g.spacing == 0.25 and np.array_equal(g.node(8, 0, 4), [1.0, -1.0, 0.0])

    def test_slab_independent(self):
        fn = lambda p: np.sin(p).sum(axis=1)  # noqa: E731
        assert np.array_equal(field_from_function(fn, 17, slab=3).values, field_from_function(fn, 17).values)

    def test_non_finite_reports_node(self):
        with pytest.raises(NumericError, match="node"):
            field_from_function(lambda p: np.where(p[:, 0] > 0.9, np.nan, 0.0), 8)

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            GridField(np.zeros((3, 3, 4)))
        with pytest.raises(NumericError):
            GridField(np.full((3, 3, 3), np.inf))

    def test_save_load_exact(self, tmp_path):
        g = GridField(np.random.default_rng(0).normal(size=(5, 5, 5)))
        back = load_grid(save_grid(g, tmp_path / "f.grid"))
        assert np.array_equal(back.values, g.values) and (back.lo, back.hi) == (-1.0, 1.0)
        assert (tmp_path / "f.grid").stat().st_size == 12 + 48 + 8 * 125

    def test_load_truncated(self, tmp_path):
        p = save_grid(GridField(np.zeros((4, 4, 4))), tmp_path / "f.grid")
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(EvaluationError):
            load_grid(p)

    def test_evaluate_grid_model(self):
        model = ConditionalSdfModel(EncoderConfig(widths=(8,), latent_dim=8, grid_resolution=4),
                                    DecoderConfig(1, 8), 0)
        cloud = geo.sample_surface(geo.sphere(0.5), 100, 0)
        g = evaluate_grid(model, cloud, 8)
        feats = model.encode(cloud)
        assert np.array_equal(g.values.reshape(-1), model.predict_values(grid_nodes(8), feats))
        with pytest.raises(ValueError):
            evaluate_grid(model, cloud, 4)


class TestMarchingCubes:
    def test_sphere_watertight_and_accurate(self, sphere_mesh):
        m = sphere_mesh
        assert m.is_watertight() and m.euler_characteristic() == 2
        r = np.linalg.norm(m.vertices, axis=1)
        assert np.max(np.abs(r - 0.5)) <= 2 * (2 / 63)

    def test_sphere_normals_outward(self, sphere_mesh):
        m = sphere_mesh
        centroids = m.vertices[m.triangles].mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", m.face_normals(), centroids) > 0)

    def test_negated_field_flips_winding(self):
        g = _sdf_grid(geo.sphere(0.5), 24)
        m = marching_cubes(GridField(-g.values))
        centroids = m.vertices[m.triangles].mean(axis=1)
        assert np.all(np.einsum("ij,ij->i", m.face_normals(), centroids) < 0)

    def test_torus_genus_one(self):
        m = marching_cubes(_sdf_grid(geo.torus(0.5, 0.2), 48))
        assert m.is_watertight() and m.euler_characteristic() == 0

    def test_no_crossing_empty(self):
        assert marching_cubes(GridField(np.ones((8, 8, 8)))).is_empty
        assert marching_cubes(GridField(-np.ones((8, 8, 8)))).is_empty

    def test_single_negative_node(self):
        v = np.ones((5, 5, 5))
        v[2, 2, 2] = -1.0
        m = marching_cubes(GridField(v))
        assert len(m.vertices) == 6 and len(m.triangles) == 8
        assert m.is_watertight() and m.euler_characteristic() == 2

    def test_exact_zero_nodes_nudged(self):
        # every node on the plane x = 0 is exactly zero
        a = np.linspace(-1, 1, 9)
        v = np.broadcast_to(a[:, None, None], (9, 9, 9)).copy()
        m = marching_cubes(GridField(v))
        assert not m.is_empty and np.all(np.abs(m.vertices[:, 0]) < 1e-9)
        assert np.all(m.areas() > 0)

    def test_vertices_float32_representable(self, sphere_mesh):
        v = sphere_mesh.vertices
        assert np.array_equal(v.astype(np.float32).astype(np.float64), v)


class TestObj:
    def test_round_trip_exact(self, tmp_path, sphere_mesh):
        back = import_mesh(export_mesh(sphere_mesh, tmp_path / "s.obj"))
        assert np.array_equal(back.vertices, sphere_mesh.vertices)
        assert np.array_equal(back.triangles, sphere_mesh.triangles)

    def test_format(self, tmp_path):
        m = TriangleMesh(np.array([[0.0, -0.0, 1.0], [0.5, 0, 0], [0, 0.25, 0]]), np.array([[0, 1, 2]]))
        text = export_mesh(m, tmp_path / "t.obj").read_text().splitlines()
        assert text == ["v 0 0 1", "v 0.5 0 0", "v 0 0.25 0", "f 1 2 3"]

    def test_empty_mesh(self, tmp_path):
        back = import_mesh(export_mesh(TriangleMesh(), tmp_path / "e.obj"))
        assert back.is_empty and (tmp_path / "e.obj").read_text() == ""

    def test_rejects_quads(self, tmp_path):
        p = tmp_path / "q.obj"
        p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(EvaluationError):
            import_mesh(p)

    def test_unsupported_format(self, tmp_path, sphere_mesh):
        with pytest.raises(ValueError):
            export_mesh(sphere_mesh, tmp_path / "s.ply", fmt="ply")
