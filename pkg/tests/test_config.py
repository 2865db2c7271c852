import pytest

from tigerfg.config import ConfigError, SCHEMA, load_config, parse_config


class TestParsing:
    def test_empty_config_uses_defaults(self):
        cfg = parse_config("")
        assert cfg["seed"] == 7
        assert cfg["train.batch"] == 32

    def test_comments_and_blank_lines(self):
        cfg = parse_config("# a comment\n\nseed = 12  # trailing\n")
        assert cfg["seed"] == 12

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config("not.a.key = 3")

    def test_type_errors_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("train.batch = many")

    def test_range_validation(self):
        with pytest.raises(ConfigError):
            parse_config("loss.tau_q2i = 0")
        with pytest.raises(ConfigError):
            parse_config("train.batch = 1")
        with pytest.raises(ConfigError):
            parse_config("world.clicklog_rate = 1.5")

    def test_cross_validation(self):
        with pytest.raises(ConfigError):
            parse_config("gates.tau_low = 0.99\ngates.tau_high = 0.5")
        with pytest.raises(ConfigError):
            parse_config("fusion.lambda_m = 0.9\nfusion.lambda_c = 0.9")
        with pytest.raises(ConfigError):
            parse_config("scene.px = 60")
        with pytest.raises(ConfigError):
            parse_config("train.toggles = QQ")
        with pytest.raises(ConfigError):
            parse_config("train.data = both")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("seed 12")

    def test_dump_round_trips(self):
        cfg = parse_config("seed = 3\ntrain.lr = 0.0005")
        again = parse_config(cfg.dump())
        assert again.values == cfg.values


class TestTypedViews:
    def test_world_view(self):
        cfg = parse_config("world.items = 99\nsplit.eval_pairs = 11")
        world = cfg.world()
        assert world.n_items == 99 and world.eval_pairs == 11

    def test_model_view(self):
        cfg = parse_config("enc.c_u = 24\nfusion.slots = 3")
        mcfg = cfg.model()
        assert mcfg.c_u == 24 and mcfg.n_slots == 3

    def test_train_view_with_overrides(self):
        cfg = parse_config("train.toggles = SB")
        tcfg = cfg.train()
        assert tcfg.toggles.to_string() == "SB"
        tcfg2 = cfg.train(toggles="S", data_mix="raw")
        assert tcfg2.toggles.to_string() == "S" and tcfg2.data_mix == "raw"

    def test_loss_weights_view(self):
        cfg = parse_config("loss.lambda_srd = 0.25\nloss.roi_h = 2")
        w = cfg.loss_weights()
        assert w.lambda_srd == 0.25 and w.roi_h == 2

    def test_every_schema_key_has_description(self):
        for key, (_, _, _, desc) in SCHEMA.items():
            assert isinstance(desc, str) and desc, key


class TestEnvVar:
    def test_env_override(self, tmp_path, monkeypatch):
        path = tmp_path / "env.cfg"
        path.write_text("seed = 404\n")
        monkeypatch.setenv("TIGERFG_CONFIG", str(path))
        assert load_config(None)["seed"] == 404

    def test_explicit_path_beats_env(self, tmp_path, monkeypatch):
        env_cfg = tmp_path / "env.cfg"
        env_cfg.write_text("seed = 404\n")
        explicit = tmp_path / "explicit.cfg"
        explicit.write_text("seed = 17\n")
        monkeypatch.setenv("TIGERFG_CONFIG", str(env_cfg))
        assert load_config(str(explicit))["seed"] == 17

    def test_no_env_no_path_defaults(self, monkeypatch):
        monkeypatch.delenv("TIGERFG_CONFIG", raising=False)
        assert load_config(None)["seed"] == 7

    def test_shipped_presets_parse(self):
        import os
        here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        for name in ("desk.cfg", "paper.cfg"):
            cfg = load_config(os.path.join(here, "configs", name))
            assert cfg["fusion.tau_p"] == 0.07
