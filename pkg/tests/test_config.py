import pytest

from gtakit import config


def test_defaults():
    cfg = config.load_config()
    assert cfg.model.token_dim == 126 and cfg.model.variant == "gta"
    assert cfg.train.batch_size == 16 and cfg.train.steps == 20000
    assert cfg.train.lr == 2e-4 and cfg.train.weight_decay == 1e-3


@pytest.mark.parametrize("variant,scale,d", [("gta", "desk", 126), ("ape", "desk", 126),
                                             ("gta-kron", "desk", 128), ("gta", "full", 510),
                                             ("rpe", "full", 512), ("gta-kron", "full", 512)])
def test_default_widths(variant, scale, d):
    cfg = config.parse_pairs([("model.variant", variant), ("run.scale", scale)])
    assert cfg.model.token_dim == d


def test_file_and_overrides(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[model]\nvariant = ape\nmlp_hidden = 64\n\n[train]\nsteps = 50\nview_shuffle = yes\n"
                 "\n[run]\nseed = 4\n")
    cfg = config.load_config(p, [config.parse_override("train.steps=70")])
    assert cfg.model.variant == "ape" and cfg.model.mlp_hidden == 64
    assert cfg.train.steps == 70 and cfg.train.view_shuffle is True
    assert cfg.seed == cfg.model.seed == cfg.train.seed == 4


def test_ini_round_trip(tmp_path):
    cfg = config.parse_pairs([("model.variant", "rpe"), ("train.lr", "0.001"), ("data.train", "a.gtas")])
    p = tmp_path / "c.ini"
    p.write_text(cfg.to_ini())
    again = config.load_config(p)
    assert again.flat() == cfg.flat()


@pytest.mark.parametrize("pairs", [
    [("model.nope", "1")],
    [("bogus.steps", "1")],
    [("steps", "1")],
    [("train.steps", "many")],
    [("train.view_shuffle", "maybe")],
    [("run.scale", "huge")],
    [("model.variant", "gta"), ("model.token_dim", "128")],
])
def test_rejects_bad_entries(pairs):
    with pytest.raises(config.ConfigError):
        config.parse_pairs(pairs)


def test_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        config.load_config(tmp_path / "missing.ini")
    p = tmp_path / "dup.ini"
    p.write_text("[train]\nsteps = 1\nsteps = 2\n")
    with pytest.raises(config.ConfigError):
        config.load_config(p)
    with pytest.raises(config.ConfigError):
        config.parse_override("train.steps")


def test_log_resolved(caplog):
    import logging

    with caplog.at_level(logging.INFO):
        config.load_config().log_resolved()
    assert "config model.token_dim = 126" in caplog.text
