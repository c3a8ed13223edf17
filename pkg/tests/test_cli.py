import csv
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from semisdf import cli
from semisdf import data
from semisdf import evaluation as ev
from semisdf.io import save_xyz
from semisdf.model import load_checkpoint
from semisdf.reconstruction import import_mesh

SPLITS = {"labeled": {"sphere": 2, "box": 2, "capsule": 2}, "unlabeled": {"cylinder": 2},
          "test": {"torus": 2}}
CONFIG = {
    "encoder": {"widths": [8, 16], "latent_dim": 8, "grid_resolution": 4},
    "decoder": {"hidden_layers": 1, "hidden_dim": 16},
    "stage1": {"epochs": 2, "queries_per_cloud": 32, "cloud_size": 256, "point_subsample": 32, "pool_size": 128},
    "stage2": {"epochs": 1, "queries_per_cloud": 32, "cloud_size": 256, "point_subsample": 32, "pool_size": 128},
    "resolution": 16,
    "chamfer": {"samples": 500},
    "noise": {"variances": [0.0, 0.01, 0.05]},
    "seeds": [0],
    "eval_per_category": 1,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "splits.json").write_text(json.dumps(SPLITS))
    (root / "config.json").write_text(json.dumps(CONFIG))
    d = root / "data"
    assert cli.main(["gen-data", "--data", str(d), "--config", str(root / "config.json"),
                     "--splits", str(root / "splits.json")]) == 0
    assert cli.main(["train", "--stage", "1", "--data", str(d), "--config", str(root / "config.json"),
                     "--out", str(root / "run"), "--no-figures"]) == 0
    return root


def _args(ws, *extra):
    return ["--data", str(ws / "data"), "--config", str(ws / "config.json"), *extra]


class TestGenData:
    def test_manifest_and_checksums(self, workspace, tmp_path):
        ds = data.read_dataset(workspace / "data")
        assert ds.statistics()["test"]["instances"] == 2
        assert json.loads((workspace / "data" / "run_manifest.json").read_text())["data_checksum"]
        again = tmp_path / "again"
        assert cli.main(["gen-data", "--data", str(again), "--config", str(workspace / "config.json"),
                         "--splits", str(workspace / "splits.json")]) == 0
        a = json.loads((workspace / "data" / data.MANIFEST_NAME).read_text())["clouds"]
        b = json.loads((again / data.MANIFEST_NAME).read_text())["clouds"]
        assert a == b

    def test_env_var_default(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("GENSDF_DATA_DIR", str(tmp_path / "env"))
        assert cli.main(["gen-data", "--config", str(workspace / "config.json"),
                         "--splits", str(workspace / "splits.json")]) == 0
        assert (tmp_path / "env" / data.MANIFEST_NAME).is_file()

    def test_no_data_dir(self, monkeypatch):
        monkeypatch.delenv("GENSDF_DATA_DIR", raising=False)
        assert cli.main(["gen-data"]) == 2


class TestTrain:
    def test_stage1_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "stage1_epoch000.gsdf").is_file() and (run / "stage1_epoch001.gsdf").is_file()
        man = json.loads((run / "stage1_run_manifest.json").read_text())
        assert man["config_hash"] and man["seeds"] == [0]
        with open(run / "stage1_metrics.csv", newline="") as fh:
            assert len(list(csv.DictReader(fh))) == 2 * 4

    def test_stage2_requires_init(self, workspace, capsys):
        assert cli.main(["train", "--stage", "2", *_args(workspace, "--out", str(workspace / "s2"))]) == 2
        assert "--init" in capsys.readouterr().err

    def test_stage2_from_checkpoint(self, workspace, tmp_path):
        init = workspace / "run" / "stage1_last.gsdf"
        assert cli.main(["train", "--stage", "2", *_args(workspace, "--out", str(tmp_path), "--init", str(init),
                                                         "--no-figures")]) == 0
        assert load_checkpoint(tmp_path / "stage2_last.gsdf").num_parameters() == \
            load_checkpoint(init).num_parameters()

    def test_stage2_from_scratch(self, workspace, tmp_path):
        assert cli.main(["train", "--stage", "2", *_args(workspace, "--out", str(tmp_path), "--from-scratch",
                                                         "--no-figures")]) == 0

    def test_missing_init_checkpoint(self, workspace, tmp_path):
        assert cli.main(["train", "--stage", "2", *_args(workspace, "--out", str(tmp_path),
                                                         "--init", str(tmp_path / "none.gsdf"))]) == 2

    def test_dry_run(self, workspace, tmp_path, capsys):
        out = tmp_path / "dry"
        assert cli.main(["train", "--stage", "1", *_args(workspace, "--out", str(out), "--dry-run")]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["dataset"]["labeled"]["instances"] == 6 and doc["config"]["stage1"]["epochs"] == 2
        assert not out.exists()

    def test_resume_matches(self, workspace, tmp_path):
        run = tmp_path / "r"
        assert cli.main(["train", "--stage", "1", *_args(workspace, "--out", str(run), "--no-figures",
                                                         "--resume", str(workspace / "run" / "stage1_epoch000.gsdf"))]) == 0
        a = load_checkpoint(run / "stage1_last.gsdf").state()
        b = load_checkpoint(workspace / "run" / "stage1_last.gsdf").state()
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_missing_dataset(self, workspace, tmp_path):
        assert cli.main(["train", "--stage", "1", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == 2

    def test_bad_config(self, workspace, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"stage1": {"nope": 1}}))
        assert cli.main(["train", "--stage", "1", "--data", str(workspace / "data"), "--config", str(bad),
                         "--out", str(tmp_path)]) == 2

    def test_locked_run_dir(self, workspace, tmp_path):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").write_text("12345")
        assert cli.main(["train", "--stage", "1", *_args(workspace, "--out", str(out))]) != 0


@pytest.fixture(scope="module")
def torus_cloud(workspace):
    ds = data.read_dataset(workspace / "data")
    e = ds.split("test")[0]
    path = workspace / "torus.xyz"
    save_xyz(ds.clouds[e.shape_id], path)
    return path, e.shape


class TestReconstruct:
    def test_obj_written(self, workspace, torus_cloud, tmp_path):
        cloud, _ = torus_cloud
        out = tmp_path / "m.obj"
        code = cli.main(["reconstruct", "--config", str(workspace / "config.json"),
                         "--checkpoint", str(workspace / "run" / "stage1_last.gsdf"),
                         "--cloud", str(cloud), "--out", str(out), "--grid-out", str(tmp_path / "f.grid")])
        assert code == 0 and out.is_file() and (tmp_path / "f.grid").is_file()
        assert json.loads(out.with_suffix(".run.json").read_text())["reports"][0] == str(out)
        import_mesh(out)

    def test_zero_refine_is_zero_shot(self, workspace, torus_cloud, tmp_path):
        cloud, _ = torus_cloud
        ck = str(workspace / "run" / "stage1_last.gsdf")
        base = ["reconstruct", "--config", str(workspace / "config.json"), "--checkpoint", ck, "--cloud", str(cloud)]
        assert cli.main(base + ["--out", str(tmp_path / "a.obj")]) == 0
        assert cli.main(base + ["--out", str(tmp_path / "b.obj"), "--refine-iters", "0"]) == 0
        assert (tmp_path / "a.obj").read_text() == (tmp_path / "b.obj").read_text()

    def test_normalize_flag(self, workspace, torus_cloud, tmp_path):
        cloud, _ = torus_cloud
        assert cli.main(["reconstruct", "--config", str(workspace / "config.json"),
                         "--checkpoint", str(workspace / "run" / "stage1_last.gsdf"), "--cloud", str(cloud),
                         "--out", str(tmp_path / "n.obj"), "--normalize", "--refine-iters", "2"]) == 0

    def test_missing_checkpoint_exit_2(self, workspace, torus_cloud, tmp_path):
        cloud, _ = torus_cloud
        assert cli.main(["reconstruct", "--checkpoint", str(tmp_path / "none.gsdf"), "--cloud", str(cloud),
                         "--out", str(tmp_path / "x.obj")]) == 2

    def test_missing_cloud_exit_2(self, workspace, tmp_path):
        assert cli.main(["reconstruct", "--checkpoint", str(workspace / "run" / "stage1_last.gsdf"),
                         "--cloud", str(tmp_path / "none.xyz"), "--out", str(tmp_path / "x.obj")]) == 2

    def test_corrupt_checkpoint_exit_2(self, workspace, torus_cloud, tmp_path):
        bad = tmp_path / "bad.gsdf"
        bad.write_bytes(b"junk")
        assert cli.main(["reconstruct", "--checkpoint", str(bad), "--cloud", str(torus_cloud[0]),
                         "--out", str(tmp_path / "x.obj")]) == 2


class TestEval:
    def test_unseen_report(self, workspace, tmp_path):
        out = tmp_path / "unseen"
        assert cli.main(["eval", *_args(workspace, "--mode", "unseen", "--out", str(out), "--checkpoint",
                                        str(workspace / "run" / "stage1_last.gsdf"))]) == 0
        doc = json.loads(out.with_suffix(".json").read_text())
        ev.validate_report(doc)
        assert {r["category"] for r in doc["records"]} == {"torus"}
        assert out.with_suffix(".png").is_file()

    def test_noise_rows(self, workspace, tmp_path):
        out = tmp_path / "noise"
        assert cli.main(["eval", *_args(workspace, "--mode", "noise", "--out", str(out), "--no-figures",
                                        "--checkpoint", str(workspace / "run" / "stage1_last.gsdf"))]) == 0
        with open(out.with_suffix(".csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [float(r["variance"]) for r in rows] == CONFIG["noise"]["variances"]
        assert json.loads(out.with_suffix(".json").read_text())["schema"] == "semisdf.noise/1"

    def test_ablation_all_arms(self, workspace, tmp_path):
        out = tmp_path / "abl"
        assert cli.main(["eval", *_args(workspace, "--mode", "ablation", "--out", str(out))]) == 0
        doc = json.loads(out.with_suffix(".json").read_text())
        ev.validate_report(doc)
        assert {r["arm"] for r in doc["records"]} == set(ev.ARMS)
        assert {r["split"] for r in doc["records"]} == {"seen", "unseen"}
        man = json.loads(out.with_suffix(".run.json").read_text())
        assert man["config_hash"] == doc["metadata"]["config_hash"]

    def test_checkpoint_required(self, workspace, tmp_path):
        assert cli.main(["eval", *_args(workspace, "--mode", "seen", "--out", str(tmp_path / "x"))]) == 2

    def test_unknown_arm_exit_1(self, workspace, tmp_path):
        code = cli.main(["eval", *_args(workspace, "--mode", "ablation", "--arms", "bogus",
                                        "--out", str(tmp_path / "x"))])
        assert code == 1


class TestEntryPoint:
    def test_bad_subcommand(self):
        assert cli.main(["explode"]) == 2

    def test_help_zero(self):
        assert cli.main(["--help"]) == 0

    @pytest.mark.skipif(shutil.which("semisdf") is None, reason="console script not installed")
    def test_console_script(self):
        res = subprocess.run(["semisdf", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "gen-data" in res.stdout

    def test_module_exit_code(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "semisdf.cli", "reconstruct", "--checkpoint",
                              str(tmp_path / "x.gsdf"), "--cloud", "x.xyz", "--out", "x.obj"],
                             capture_output=True, text=True)
        assert res.returncode == 2 and "checkpoint not found" in res.stderr
