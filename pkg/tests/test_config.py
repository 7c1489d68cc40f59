import pytest

from minivlp.config import (
    ConfigError,
    ModelConfig,
    desk_model_config,
    load_configs,
    paper_model_config,
    parse_config_text,
)


def test_paper_preset_reproduces_published_values():
    cfg = paper_model_config()
    assert cfg.hidden_dim == 768
    assert cfg.text_layers == 12
    assert cfg.cross_layers == 6
    assert cfg.image_resolution == 224
    assert cfg.tau_init == 0.07
    assert cfg.tau_s == 0.1
    assert cfg.tau_t == 0.04
    assert cfg.ema_momentum == 0.995
    assert cfg.queue_capacity == 36864
    assert cfg.queue_decay == 0.99
    assert cfg.mask_ratio == 0.15
    assert cfg.freeze_image_encoder is True


def test_desk_preset_is_valid_and_small():
    cfg = desk_model_config()
    cfg.validate()
    assert cfg.hidden_dim == 64
    assert cfg.freeze_image_encoder is False


def test_divisibility_invariants():
    with pytest.raises(ValueError, match="num_heads"):
        ModelConfig(hidden_dim=30, num_heads=4).validate()
    with pytest.raises(ValueError, match="image_patch_size"):
        ModelConfig(image_resolution=30, image_patch_size=8).validate()


def test_unit_interval_invariants():
    with pytest.raises(ValueError, match="queue_decay"):
        ModelConfig(queue_decay=1.5).validate()
    with pytest.raises(ValueError, match="tgd_alpha"):
        ModelConfig(tgd_alpha=-0.1).validate()


def test_unknown_key_is_hard_error():
    with pytest.raises(ConfigError, match="hiden_dim"):
        parse_config_text("hiden_dim=64")


def test_typed_validation():
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config_text("hidden_dim=sixty-four")
    with pytest.raises(ConfigError, match="expected a boolean"):
        parse_config_text("freeze_image_encoder=maybe")
    assert parse_config_text("tau_init=0.07") == {"tau_init": 0.07}
    assert parse_config_text("# comment\n\nepochs=3  # trailing") == {"epochs": 3}


def test_layering_preset_file_env_explicit(tmp_path):
    override = tmp_path / "o.cfg"
    override.write_text("hidden_dim=32\nepochs=5\n")
    model_cfg, train_cfg = load_configs(
        "desk", override, environ={"MINIVLP_EPOCHS": "7"}, seed=99
    )
    assert model_cfg.hidden_dim == 32
    assert train_cfg.epochs == 7  # env beats file
    assert train_cfg.seed == 99  # explicit beats everything


def test_env_unknown_key_rejected():
    with pytest.raises(ConfigError, match="MINIVLP_BOGUS"):
        load_configs("desk", environ={"MINIVLP_BOGUS": "1"})
