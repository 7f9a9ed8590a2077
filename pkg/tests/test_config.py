import pytest

from hiertail.config import ConfigError, ExperimentConfig, parse_config_text, resolve_config


def test_parse_types_and_comments():
    values = parse_config_text("epochs = 3  # short\nks = 1, 5\nlevel-weights = 1 1 1 1\nablate =\n")
    assert values == {"epochs": 3, "ks": (1, 5), "level_weights": (1.0, 1.0, 1.0, 1.0), "ablate": None}


@pytest.mark.parametrize("text", ["bogus = 1", "epochs three", "epochs = x", "tau = 0", "loss = mse",
                                  "learning_rate = -1", "loss = ce\nablate = no_gumbel"])
def test_bad_config(tmp_path, text):
    p = tmp_path / "c.conf"
    p.write_text(text + "\n")
    with pytest.raises(ConfigError):
        resolve_config(p, environ={})


def test_precedence(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("seed = 1\nepochs = 2\n")
    assert resolve_config(p, environ={}).seed == 1
    assert resolve_config(p, environ={"HIERTAIL_SEED": "5"}).seed == 5
    assert resolve_config(p, {"seed": 9}, environ={"HIERTAIL_SEED": "5"}).seed == 9
    assert resolve_config(None, environ={}).seed == ExperimentConfig().seed
    with pytest.raises(ConfigError):
        resolve_config(None, environ={"HIERTAIL_SEED": "x"})


def test_dump_roundtrip():
    cfg = ExperimentConfig(data="d.csv", epochs=4, ks=(1, 10))
    again = ExperimentConfig(**parse_config_text(cfg.dump()))
    assert again == cfg


def test_lr_zero_allowed():
    assert resolve_config(None, {"learning_rate": 0.0}, environ={}).learning_rate == 0.0
