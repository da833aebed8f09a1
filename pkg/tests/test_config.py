import pytest

from vai.config import (
    ConfigError,
    PipelineConfig,
    load_config,
    parse_config,
    serialize_config,
    set_key,
)


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert parse_config(serialize_config(cfg)) == cfg


def test_modified_round_trip():
    cfg = PipelineConfig()
    for key, value in [("adapter.lam", "0.25"), ("augment.boxes", "2,5"), ("attention.epsilon", "0.3"),
                       ("evaluation.textures", "wood,noise"), ("augment.base_weights", "random_color:2.0"),
                       ("env.draw_target", "false"), ("augment.overlay_dir", "/tmp/imgs")]:
        set_key(cfg, key, value)
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert again.adapter.lam == 0.25 and again.augment.boxes == (2, 5)
    assert again.evaluation.textures == ("wood", "noise")
    assert again.augment.base_weights == {"random_color": 2.0}
    assert again.env.draw_target is False


def test_comments_and_blank_lines():
    cfg = parse_config("# header\n\nrun.seed = 7  # trailing\n")
    assert cfg.run.seed == 7


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="adapter.lamda"):
        parse_config("adapter.lamda = 1\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("bogus.x = 1\n")


def test_bad_values():
    with pytest.raises(ConfigError, match="run.seed"):
        parse_config("run.seed = abc\n")
    with pytest.raises(ConfigError, match="line|expected"):
        parse_config("not a key value\n")
    with pytest.raises(ConfigError, match="p_gaussian_noise"):
        parse_config("augment.p_gaussian_noise = 2\n")


def test_optional_none():
    cfg = parse_config("attention.epsilon = none\nevaluation.denoise_alpha = 0.5\n")
    assert cfg.attention.epsilon is None and cfg.evaluation.denoise_alpha == 0.5


def test_load_missing(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.cfg")
    assert load_config(None) == PipelineConfig()


def test_policy_config_carries_sac_section():
    cfg = parse_config("sac.lr = 0.0005\npolicy.steps = 10\n")
    pc = cfg.policy_config()
    assert pc.sac.lr == 0.0005 and pc.steps == 10
