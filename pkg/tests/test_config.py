import json

import pytest

from semisdf.config import RunConfig, preset
from semisdf.errors import ConfigurationError


class TestRunConfig:
    def test_desk_defaults(self):
        cfg = preset("desk")
        assert cfg.decoder.hidden_layers == 4 and cfg.decoder.hidden_dim == 256
        assert cfg.stage1.epochs <= 50 and cfg.seeds == (0, 1, 2)
        assert cfg.stage1.weights.lambda_m == 0.1 and cfg.stage2.weights.lambda_s == 0.1

    def test_full_preset(self):
        cfg = preset("full")
        assert (cfg.decoder.hidden_layers, cfg.decoder.hidden_dim) == (8, 512)
        assert cfg.resolution == 256 and cfg.chamfer.samples == 30000

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            preset("huge")

    def test_overlay(self):
        cfg = RunConfig.from_dict({"stage1": {"epochs": 3, "weights": {"lambda_m": 0.5}},
                                   "resolution": 32, "seeds": [4]})
        assert cfg.stage1.epochs == 3 and cfg.stage1.weights.lambda_m == 0.5
        assert cfg.stage1.lr == preset("desk").stage1.lr
        assert cfg.resolution == 32 and cfg.seeds == (4,)

    @pytest.mark.parametrize("d", [{"epochs": 3}, {"stage1": {"epoch": 3}}, {"encoder": {"variant": "x"}},
                                   {"resolution": 4}, {"seeds": []}])
    def test_rejects(self, d):
        with pytest.raises(ConfigurationError):
            RunConfig.from_dict(d)

    def test_hash(self):
        a = preset("desk")
        assert a.hash() == preset("desk").hash()
        assert a.replace(resolution=32).hash() != a.hash()
        moved = a.replace(stage1=a.stage1.replace(checkpoint_dir="/x"))
        assert moved.hash() == a.hash()

    def test_with_seed(self):
        cfg = preset("desk").with_seed(7)
        assert cfg.stage1.seed == 7 and cfg.stage2.seed == 7 and cfg.seeds == (7,)

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"preset": "full", "resolution": 128}))
        cfg = RunConfig.load(p)
        assert cfg.resolution == 128 and cfg.decoder.hidden_dim == 512
        assert RunConfig.from_dict(cfg.to_dict(), preset("desk")).hash() == cfg.hash()

    def test_load_errors(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        with pytest.raises(ConfigurationError):
            RunConfig.load(bad)
        with pytest.raises(ConfigurationError):
            RunConfig.load(tmp_path / "absent.json")
        bad.write_text("[1, 2]")
        with pytest.raises(ConfigurationError):
            RunConfig.load(bad)
