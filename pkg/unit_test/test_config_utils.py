import pytest

from pyslucache.config_utils import DEFAULT_CONFIG, SEED_ENV_VAR, config_to_dict, load_config


class TestLoadConfig:
    """Test layered configuration"""

    def test_defaults(self):
        """Without inputs the defaults come back as a namespace"""
        config = load_config()
        assert config.cache.capacity == 60
        assert config.cache.bucket_boundaries == [2.7, 4.0]
        assert config.thresholds.mode == "static"
        assert config_to_dict(config) == DEFAULT_CONFIG

    def test_yaml_then_env_then_overrides(self, tmp_path, monkeypatch):
        """The file beats the defaults, the environment seed beats the file, overrides beat both"""
        path = tmp_path / "run.yaml"
        path.write_text("seed: 5\ncache:\n  capacity: 30\nl1:\n  k: 40\n", encoding="utf-8")
        assert load_config(str(path)).seed == 5

        monkeypatch.setenv(SEED_ENV_VAR, "9")
        config = load_config(str(path), overrides={"l1": {"k": 20}})
        assert (config.seed, config.cache.capacity, config.l1.k) == (9, 30, 20)
        assert config.l1.tol == DEFAULT_CONFIG["l1"]["tol"]
        assert load_config(overrides={"seed": 1}).seed == 1

    def test_empty_yaml(self, tmp_path):
        """An empty file changes nothing"""
        path = tmp_path / "empty.yaml"
        path.write_text("", encoding="utf-8")
        assert load_config(str(path)).seed == 0

    def test_bad_env_seed(self, monkeypatch):
        """A non-integer seed in the environment is a configuration error"""
        monkeypatch.setenv(SEED_ENV_VAR, "abc")
        with pytest.raises(ValueError, match=SEED_ENV_VAR):
            load_config()

    def test_unknown_key(self):
        """Typos are refused with their dotted path"""
        with pytest.raises(ValueError, match="cache.capacty"):
            load_config(overrides={"cache": {"capacty": 10}})

    @pytest.mark.parametrize(
        "overrides",
        [
            {"cache": {"capacity": 0}},
            {"cache": {"bucket_boundaries": [4.0, 2.7]}},
            {"l1": {"distribution": "cosine"}},
            {"l1": {"temperature": 0.0}},
            {"thresholds": {"mode": "auto"}},
            {"thresholds": {"l2": [1.0, 1.0]}},
            {"cloud": {"in_domain_fraction": 1.5}},
            {"cloud": {"push_every": 0}},
        ],
    )
    def test_validation(self, overrides):
        """Out-of-range values fail at load time"""
        with pytest.raises(ValueError):
            load_config(overrides=overrides)

    def test_to_dict_round_trip(self):
        """config_to_dict output loads back to the same config"""
        config = load_config(overrides={"seed": 3, "l2": {"hidden": 16}})
        data = config_to_dict(config)
        assert config_to_dict(load_config(overrides=data)) == data
