import pytest

from streetchange.config import PipelineConfig, load_config
from streetchange.errors import ConfigError


class TestLoadConfig:
    def test_defaults_without_file(self):
        cfg = load_config(None, {})
        assert cfg.train.learning_rate == 1e-3
        assert cfg.train.batch_size == 16
        assert cfg.decoder.mode == "dp"
        assert cfg.test_frac == 0.5
        assert cfg.normalize_embeddings is False

    def test_file_values_applied(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text(
            "[train]\nlearning_rate = 0.001\nepochs = 7\n"
            "[decoder]\nmode = \"consecutive\"\n"
            "[split]\ntest_frac = 0.4\n"
        )
        cfg = load_config(path, {})
        assert cfg.train.learning_rate == 0.001
        assert cfg.train.epochs == 7
        assert cfg.decoder.mode == "consecutive"
        assert cfg.test_frac == 0.4

    def test_flag_overrides_file(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[train]\nlearning_rate = 0.001\n")
        cfg = load_config(path, {"train.learning_rate": 0.01})
        assert cfg.train.learning_rate == 0.01

    def test_empty_overrides_identity(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[train]\nlearning_rate = 0.002\nseed = 3\n")
        assert load_config(path, {}).train == load_config(path, None).train

    def test_unknown_key_lists_valid_keys(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[train]\nlerning_rate = 0.001\n")
        with pytest.raises(ConfigError, match="unknown configuration key 'train.lerning_rate'") as exc:
            load_config(path, {})
        assert "train.learning_rate" in str(exc.value)

    def test_type_mismatch_names_key_path(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[train]\nepochs = \"many\"\n")
        with pytest.raises(ConfigError, match="'train.epochs' expects int"):
            load_config(path, {})

    def test_relative_paths_resolve_against_file(self, tmp_path):
        sub = tmp_path / "conf"
        sub.mkdir()
        path = sub / "cfg.toml"
        path.write_text("[paths]\nmanifest = \"data/manifest.jsonl\"\n")
        cfg = load_config(path, {})
        assert cfg.paths["manifest"] == (sub / "data" / "manifest.jsonl").resolve()

    def test_invalid_toml_rejected(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("not [valid\n")
        with pytest.raises(ConfigError, match="invalid TOML"):
            load_config(path, {})

    def test_train_config_validation_routed_to_config_error(self, tmp_path):
        path = tmp_path / "cfg.toml"
        path.write_text("[train]\nlearning_rate = -1.0\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(path, {})

    def test_require_input_names_key(self):
        cfg = load_config(None, {})
        with pytest.raises(ConfigError, match="paths.embeddings"):
            cfg.require_input("embeddings")

    def test_digest_stable_and_sensitive(self, tmp_path):
        a = load_config(None, {"train.epochs": 5})
        b = load_config(None, {"train.epochs": 5})
        c = load_config(None, {"train.epochs": 6})
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()

    def test_artifact_paths_default_to_output_dir(self):
        cfg = load_config(None, {"paths.output_dir": "/tmp/xyz"})
        assert str(cfg.artifact("head")).endswith("/tmp/xyz/head.json")
        assert str(cfg.artifact("pairs")).endswith("/tmp/xyz/pairs.csv")

    def test_explicit_manifest_beats_artifact_default(self, tmp_path):
        cfg = load_config(None, {"paths.manifest": str(tmp_path / "m.jsonl")})
        assert cfg.artifact("manifest") == tmp_path / "m.jsonl"
