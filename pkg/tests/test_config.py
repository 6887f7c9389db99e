import pytest

from ffreedg.config import SCHEMA, ConfigError, RunConfig, default_config_text, parse_config


def test_parse_basic():
    cfg = parse_config("# comment\nfed.rounds = 12  # trailing\n\nfed.agg=fedavg\nfed.cutmix = off\n")
    assert cfg["fed.rounds"] == 12 and cfg["fed.agg"] == "fedavg" and cfg["fed.cutmix"] is False
    assert cfg["fed.lr"] == SCHEMA["fed.lr"][1]
    fc = cfg.fed_config(seed=3)
    assert (fc.rounds, fc.agg, fc.cutmix, fc.seed) == (12, "fedavg", False, 3)


@pytest.mark.parametrize("text, line, what", [
    ("fed.rounds = 1\nfed.nope = 2\n", 2, "unknown key"),
    ("fed.rounds = 1\nfed.rounds = 2\n", 2, "duplicate"),
    ("\n\nfed.tau = 1.5\n", 3, "fed.tau"),
    ("fed.rounds = many\n", 1, "fed.rounds"),
    ("fed.agg = fedprox\n", 1, "fed.agg"),
    ("just words\n", 1, "key = value"),
])
def test_errors_name_the_line(text, line, what):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "run.cfg")
    assert f"run.cfg:{line}:" in str(exc.value) and what in str(exc.value)


def test_required_keys():
    cfg = parse_config("data.scenario = weather\n")
    with pytest.raises(ConfigError, match="fed.rounds"):
        cfg.require(["data.scenario", "fed.rounds"])


def test_default_text_parses_back():
    cfg = parse_config(default_config_text())
    assert all(cfg[k] == SCHEMA[k][1] for k in SCHEMA)
    assert RunConfig().pretrain_config(0).unlabeled_fraction == cfg["pretrain.unlabeled_fraction"]
