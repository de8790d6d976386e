#!/usr/bin/env python3
"""
Tests for the flat key=value run config and the named random streams
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import RunConfig, data_seed, dump_config, format_config, load_config, parse_config_text, stream_seed
from errors import ConfigError
from losses import MMDKind, Scheme


def test_empty_text_gives_defaults():
    """Test that comments and blank lines alone leave every default"""
    assert parse_config_text("# nothing here\n\n   \n") == RunConfig()


def test_values_are_coerced():
    """Test int, float, bool, optional and tuple keys"""
    config = parse_config_text(
        "epochs = 7\n"
        "tau_c = 0.9   # trailing comment\n"
        "use_strong_aug = off\n"
        "lr_drop_epoch = 4\n"
        "target_shift = 0.8,-0.4\n"
        "scheme = scheme_t\n"
    )
    assert config.epochs == 7
    assert config.tau_c == 0.9
    assert config.use_strong_aug is False
    assert config.lr_drop_epoch == 4
    assert config.target_shift == (0.8, -0.4)
    adapt = config.adapt_config()
    assert adapt.scheme == Scheme.SCHEME_T
    assert adapt.mmd_kind == MMDKind.EMMD
    assert adapt.epochs == 7


@pytest.mark.parametrize("text, line", [
    ("epochs = 3\nbogus_key = 1\n", 2),
    ("\n\nepochs = 3\nepochs = 4\n", 4),
    ("tau_c = high\n", 1),
    ("# header\nuse_local_structure = maybe\n", 2),
    ("epochs 3\n", 1),
])
def test_errors_carry_the_line_number(text, line):
    """Test that unknown, duplicate, malformed and mistyped lines name their line"""
    with pytest.raises(ConfigError) as info:
        parse_config_text(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_unknown_enum_values_are_rejected():
    """Test scheme, mmd_kind and data_kind validation"""
    for text in ("scheme = both\n", "mmd_kind = rbf\n", "data_kind = spirals\n"):
        with pytest.raises(ConfigError):
            parse_config_text(text)


def test_format_parses_back(tmp_path):
    """Test that a dumped config reads back equal"""
    config = RunConfig(epochs=3, alpha=0.25, target_shift=(1.0, -0.5), lr_drop_epoch=2,
                       renormalize_bank=False, output_dir="runs/x")
    assert parse_config_text(format_config(config)) == config
    path = tmp_path / "resolved-config.txt"
    dump_config(config, path)
    assert load_config(path) == config


def test_missing_file_is_a_config_error(tmp_path):
    """Test that an unreadable config path raises ConfigError"""
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_streams_are_independent():
    """Test that stream seeds depend on both the run seed and the stream name"""
    assert stream_seed(0, "init") == stream_seed(0, "init")
    assert stream_seed(0, "init") != stream_seed(0, "shuffle")
    assert stream_seed(0, "init") != stream_seed(1, "init")
    assert 0 <= data_seed(5, "target") < 2 ** 32
    assert data_seed(5, "source") != data_seed(5, "target")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
