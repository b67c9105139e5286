import pytest

from fusioncast import config


def test_defaults_cover_every_section():
    cfg = config.defaults()
    assert set(cfg) == {"grid", "data", "model", "train", "eval", "ablate"}
    assert cfg["eval"]["thresholds"] == (0.1, 1.0, 4.0)
    assert cfg["eval"]["lead_frames"] == (1, 4, 8, 12)


def test_sections_and_dotted_keys():
    cfg = config.parse_text("[train]\nlr = 0.01  # comment\nepochs=3\n\nmodel.variant = no_pwv\n")
    assert cfg["train"]["lr"] == 0.01 and cfg["train"]["epochs"] == 3
    assert cfg["model"]["variant"] == "no_pwv"


def test_unknown_keys_are_errors():
    with pytest.raises(config.ConfigKeyError):
        config.parse_text("[train]\nlearning_rate = 1\n")
    with pytest.raises(config.ConfigKeyError):
        config.parse_text("[optimizer]\n")
    with pytest.raises(config.ConfigKeyError):
        config.load(overrides=["lr=1"])


def test_bad_values():
    with pytest.raises(ValueError):
        config.parse_text("train.epochs = many\n")
    with pytest.raises(ValueError):
        config.parse_text("model.share_hc_gates = maybe\n")
    with pytest.raises(ValueError):
        config.parse_text("just words\n")


def test_dump_round_trip(tmp_path):
    cfg = config.load(overrides=["model.enc_channels=4,8", "train.lr=0.125", "eval.strict=true"])
    p = tmp_path / "c.txt"
    p.write_text(config.dump(cfg))
    assert config.load(p) == cfg


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("train.epochs = 2\n")
    assert config.load(p, ["train.epochs=5"])["train"]["epochs"] == 5


def test_help_lists_every_key():
    text = config.help_text()
    for sec, keys in config.SCHEMA.items():
        for k in keys:
            assert f"{sec}.{k} " in text
