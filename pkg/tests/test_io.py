import struct

import numpy as np
import pytest

from semisdf import data
from semisdf import io
from semisdf.errors import DatasetError


class TestXyz:
    def test_round_trip_exact(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(100, 3))
        assert np.array_equal(io.load_xyz(io.save_xyz(pts, tmp_path / "c.xyz")), pts)

    def test_comments_and_single_row(self, tmp_path):
        p = tmp_path / "c.xyz"
        p.write_text("# header\n0.5 1 -2\n")
        assert np.array_equal(io.load_xyz(p), [[0.5, 1.0, -2.0]])

    def test_wrong_columns(self, tmp_path):
        p = tmp_path / "c.xyz"
        p.write_text("1 2\n3 4\n")
        with pytest.raises(DatasetError):
            io.load_xyz(p)

    def test_missing(self, tmp_path):
        with pytest.raises(DatasetError):
            io.load_xyz(tmp_path / "none.xyz")


class TestPcb:
    def test_round_trip_float32(self, tmp_path):
        pts = np.random.default_rng(1).normal(size=(64, 3))
        back = io.load_pcb(io.save_pcb(pts, tmp_path / "c.pcb"))
        assert np.array_equal(back, pts.astype(np.float32).astype(np.float64))

    def test_layout(self, tmp_path):
        p = io.save_pcb([[1.0, 2.0, 3.0]], tmp_path / "c.pcb")
        raw = p.read_bytes()
        assert struct.unpack("<Q", raw[:8]) == (1,) and struct.unpack("<3f", raw[8:]) == (1.0, 2.0, 3.0)

    def test_count_mismatch(self, tmp_path):
        p = tmp_path / "c.pcb"
        p.write_bytes(struct.pack("<Q", 5) + b"\0" * 12)
        with pytest.raises(DatasetError):
            io.load_pcb(p)

    def test_dispatch(self, tmp_path):
        pts = np.eye(3)
        assert np.array_equal(io.load_cloud(io.save_cloud(pts, tmp_path / "a.pcb")), pts)
        assert np.array_equal(io.load_cloud(io.save_cloud(pts, tmp_path / "a.xyz")), pts)
        with pytest.raises(DatasetError):
            io.load_cloud(tmp_path / "a.ply")


class TestManifest:
    def test_desk_counts(self):
        entries = data.make_manifest(seed=0)
        counts = {}
        for e in entries:
            counts.setdefault(e.split, {}).setdefault(e.shape.category_id, 0)
            counts[e.split][e.shape.category_id] += 1
        assert counts == data.DESK_SPLITS

    def test_shapes_fit_cube(self):
        from semisdf import geometry as geo

        for e in data.make_manifest(seed=3):
            pts = geo.sample_surface(e.shape, 500, 0)
            assert np.all(np.abs(pts) < 1.0)

    def test_overlap_rejected(self):
        with pytest.raises(DatasetError):
            data.make_manifest({"labeled": {"sphere": 1}, "test": {"sphere": 1}})

    def test_json_round_trip(self, tmp_path):
        entries = data.make_manifest(seed=1)
        back = data.load_manifest(data.save_manifest(entries, tmp_path / "m.json"))
        assert back == entries


class TestDiskDataset:
    SPLITS = {"labeled": {"sphere": 2, "box": 1}, "unlabeled": {"cylinder": 1}, "test": {"torus": 1}}

    def test_write_read(self, tmp_path):
        entries = data.make_manifest(self.SPLITS, seed=0)
        data.write_dataset(tmp_path, entries, cloud_size=128, seed=0)
        ds = data.read_dataset(tmp_path)
        assert ds.entries == entries and ds.meta["cloud_size"] == 128
        assert ds.statistics()["labeled"] == {"instances": 3, "categories": {"sphere": 2, "box": 1}}
        assert all(len(c) == 128 for c in ds.clouds.values())

    def test_regeneration_checksums(self, tmp_path):
        entries = data.make_manifest(self.SPLITS, seed=0)
        import json

        data.write_dataset(tmp_path / "a", entries, 128, 0)
        data.write_dataset(tmp_path / "b", entries, 128, 0)
        ca = json.loads((tmp_path / "a" / data.MANIFEST_NAME).read_text())["clouds"]
        cb = json.loads((tmp_path / "b" / data.MANIFEST_NAME).read_text())["clouds"]
        assert ca == cb

    def test_tampered_cloud(self, tmp_path):
        data.write_dataset(tmp_path, data.make_manifest(self.SPLITS, seed=0), 64, 0)
        f = next((tmp_path / "clouds").glob("*.xyz"))
        f.write_text(f.read_text().replace("1", "2", 1))
        with pytest.raises(DatasetError):
            data.read_dataset(tmp_path)
        data.read_dataset(tmp_path, verify=False)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            data.read_dataset(tmp_path)

    def test_pools(self, tmp_path):
        data.write_dataset(tmp_path, data.make_manifest(self.SPLITS, seed=0), 128, 0)
        ds = data.read_dataset(tmp_path)
        lab = ds.labeled(pool_size=100)
        unl = ds.unlabeled(pool_size=100)
        assert len(lab) == 3 and len(lab.items[0].pool) == 100
        assert np.array_equal(lab.items[0].cloud, ds.clouds[lab.items[0].shape_id])
        assert len(unl) == 1 and not hasattr(unl.items[0].pool, "gt_sdf")
        data.check_stage2_disjoint(lab, unl)
