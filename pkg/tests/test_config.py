import configparser

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pretram import config
from pretram.config import RunConfig, dumps, loads, reference
from pretram.errors import ConfigError


def test_defaults_round_trip():
    text = dumps(RunConfig())
    assert dumps(loads(text)) == text


def test_overrides_round_trip_and_apply():
    text = "[data]\nnum_maps = 3\nsidewalk_width = 1.5\n[model]\nchannels = 4, 8\nattention = yes\n[sweep]\narms = baseline, aug:rotation\n"
    cfg = loads(text)
    assert cfg.data.num_maps == 3 and cfg.data.map.sidewalk_width == 1.5
    assert cfg.model.channels == (4, 8) and cfg.model.attention is True
    assert cfg.sweep.arms == ("baseline", "aug:rotation")
    again = loads(dumps(cfg))
    assert dumps(again) == dumps(cfg) and again.echo() == cfg.echo()


@settings(max_examples=30, deadline=None)
@given(
    lr=st.floats(1e-6, 1.0, allow_nan=False),
    lam=st.floats(0.0, 10.0, allow_nan=False),
    epochs=st.integers(1, 50),
    fractions=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=4),
)
def test_round_trip_property(lr, lam, epochs, fractions):
    cfg = RunConfig()
    cfg.pretrain.lr, cfg.pretrain.lam, cfg.finetune.epochs = lr, lam, epochs
    cfg.sweep.fractions = tuple(fractions)
    back = loads(dumps(cfg))
    assert back.pretrain.lr == lr and back.pretrain.lam == lam and back.finetune.epochs == epochs
    assert back.sweep.fractions == tuple(fractions)
    assert dumps(back) == dumps(cfg)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match=r"\[pretrain\] learning_rate: unknown key"):
        loads("[pretrain]\nlearning_rate = 0.1\n")


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="unknown section"):
        loads("[optim]\nlr = 0.1\n")


def test_derived_model_keys_are_not_model_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        loads("[model]\nhist_len = 8\n")


def test_model_config_takes_derived_values():
    cfg = loads("[data]\nhist_len = 6\nfut_len = 8\n[patch]\ncontext_px = 32\n[finetune]\nnum_modes = 4\n")
    m = cfg.model_config()
    assert (m.hist_len, m.fut_len, m.context_px, m.num_modes) == (6, 8, 32, 4)


def test_bad_value_type():
    with pytest.raises(ConfigError, match="epochs"):
        loads("[pretrain]\nepochs = many\n")
    with pytest.raises(ConfigError):
        loads("[model]\nattention = maybe\n")


def test_semantic_validation():
    with pytest.raises(ConfigError):
        loads("[finetune]\nload_mode = half\n")
    with pytest.raises(ConfigError):
        loads("[model]\ndropout_p = 1.0\n")
    with pytest.raises(ConfigError):
        loads("[sweep]\narms = baseline, nonsense\n")


def test_palette_default_accepted_override_rejected():
    loads("[data]\npalette_drivable = 100, 100, 100\n")
    with pytest.raises(ConfigError, match="palette is fixed"):
        loads("[data]\npalette_drivable = 1, 2, 3\n")


def test_reference_lists_every_key_with_default():
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(reference())
    echo = RunConfig().echo()
    assert tuple(parser.sections()) == config.SECTIONS
    for section, values in echo.items():
        assert set(parser[section]) == set(values)
    assert loads(reference()).echo() == echo


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load(tmp_path / "absent.ini")
