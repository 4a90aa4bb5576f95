import json
import math

import pytest

from svflow.experiments.config import (EXPERIMENTS, ConfigError, build_config, config_to_json, load_config,
                                       parse_beta)


class TestBuild:
    @pytest.mark.parametrize("name", sorted(EXPERIMENTS))
    def test_defaults_roundtrip(self, name):
        cfg = build_config(name)
        again = build_config(name, json.loads(config_to_json(cfg)))
        assert again == cfg

    def test_toy_defaults(self):
        cfg = build_config("toy2d")
        assert (cfg.num_components, cfg.step_size, cfg.num_steps, cfg.batch_size, cfg.lr, cfg.iterations) == \
            (8, 0.01, 100, 512, 0.01, 10_000)
        assert cfg.betas == [0.0, 0.1, 0.5, "inf"]

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="lerning_rate"):
            build_config("vmf", {"lerning_rate": 0.1})

    def test_wrong_type_rejected(self):
        with pytest.raises(ConfigError, match="integer"):
            build_config("vmf", {"dim": 2.5})
        with pytest.raises(ConfigError, match="beta"):
            build_config("toy2d", {"betas": [0.1, "big"]})

    def test_overrides_parse_json(self):
        cfg = build_config("toy2d", {}, ["betas=[0, \"inf\"]", "lr=0.5", "posterior_mode=tied"])
        assert cfg.betas == [0, "inf"] and cfg.lr == 0.5 and cfg.posterior_mode == "tied"
        with pytest.raises(ConfigError, match="key=value"):
            build_config("toy2d", {}, ["lr"])

    def test_experiment_tag(self):
        assert build_config("kernel", {"experiment": "kernel"}).dim == 2
        with pytest.raises(ConfigError, match="not 'kernel'"):
            build_config("kernel", {"experiment": "vmf"})
        with pytest.raises(ConfigError, match="unknown experiment"):
            build_config("nope")


class TestLoad:
    def test_missing_path_named(self, tmp_path):
        p = tmp_path / "absent.json"
        with pytest.raises(ConfigError, match="absent.json"):
            load_config("vmf", p)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config("vmf", p)
        p.write_text("[1]")
        with pytest.raises(ConfigError, match="object"):
            load_config("vmf", p)

    def test_file_values(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"dim": 16, "seed": 7}))
        cfg = load_config("vmf", p, ["seed=9"])
        assert (cfg.dim, cfg.seed) == (16, 9)


def test_parse_beta():
    assert parse_beta("INF") == math.inf
    assert parse_beta(0) == 0.0
    for bad in (-1, True, "x", None):
        with pytest.raises(ConfigError):
            parse_beta(bad)
