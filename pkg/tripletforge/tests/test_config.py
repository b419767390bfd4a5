from __future__ import annotations

import json
from pathlib import Path

import pytest

from tripletforge.src.config import ConfigError, RunConfig, env_int, load_config
from tripletforge.src.core import ValidationError
from tripletforge.src.fsta import ObjectSource
from tripletforge.src.soft_transfer import QMode


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_without_file_or_environment() -> None:
    config = load_config(env={})

    assert config == RunConfig()
    assert config.ietrans.k_i == 70.0
    assert config.eval.k == (50, 100)
    assert config.harness_gan.feature_dim == 16


def test_file_environment_and_overrides_take_precedence_in_order(tmp_path: Path) -> None:
    path = _write(
        tmp_path,
        'seed = 3\nlog_level = "warning"\n\n[ietrans]\nk_i = 50\nk_e = 20\n\n'
        '[soft]\nq_mode = "naive"\n\n[fsta]\nobject_source = "swap"\n',
    )

    config = load_config(
        path, env={"TF_SEED": "7"}, overrides={"ietrans.k_i": 30, "ietrans.k_e": None}
    )

    assert config.seed == 7
    assert config.log_level == "WARNING"
    assert (config.ietrans.k_i, config.ietrans.k_e) == (30, 20)
    assert config.soft.q_mode is QMode.NAIVE
    assert config.fsta.object_source is ObjectSource.SWAP
    assert config.gan.seed == 7
    assert config.harness_gan.seed == 7


def test_explicit_generator_seed_is_kept(tmp_path: Path) -> None:
    path = _write(tmp_path, "seed = 4\n\n[gan]\nseed = 11\n")

    config = load_config(path, env={})

    assert config.gan.seed == 11
    assert config.harness_gan.seed == 4


def test_arrays_become_tuples(tmp_path: Path) -> None:
    path = _write(
        tmp_path, "[eval]\nk = [20, 50]\n\n[synth]\nconfusion_pairs = [[1, 4, 0.5]]\n"
    )

    config = load_config(path, env={})

    assert config.eval.k == (20, 50)
    assert config.synth.confusion_pairs == ((1, 4, 0.5),)


@pytest.mark.parametrize(
    ("text", "message"),
    [
        ("[bogus]\nx = 1\n", "unknown config section or key 'bogus'"),
        ("[ietrans]\nk_x = 1\n", r"unknown keys in \[ietrans\]: k_x"),
        ("seed = -1\n", "seed must be a non-negative integer"),
        ('log_level = "chatty"\n', "log_level must be one of"),
        ("[ietrans\n", "run.toml"),
    ],
)
def test_invalid_files_raise_config_error(tmp_path: Path, text: str, message: str) -> None:
    with pytest.raises(ConfigError, match=message):
        load_config(_write(tmp_path, text), env={})


def test_section_validation_errors_surface(tmp_path: Path) -> None:
    with pytest.raises(ValidationError, match="ietrans: k_i"):
        load_config(_write(tmp_path, "[ietrans]\nk_i = 120\n"), env={})


def test_unknown_override_is_rejected() -> None:
    with pytest.raises(ConfigError, match="unknown override 'nope.key'"):
        load_config(env={}, overrides={"nope.key": 1})
    with pytest.raises(ConfigError, match="unknown override 'verbose'"):
        load_config(env={}, overrides={"verbose": True})


def test_environment_log_level_and_bad_seed() -> None:
    assert load_config(env={"LOG_LEVEL": "debug"}).log_level == "DEBUG"
    with pytest.raises(ConfigError, match="TF_SEED must be an integer"):
        load_config(env={"TF_SEED": "abc"})
    with pytest.raises(ConfigError, match="TF_SEED must be >= 0"):
        load_config(env={"TF_SEED": "-2"})


def test_env_int_default_and_minimum() -> None:
    assert env_int({}, "N", 5) == 5
    assert env_int({"N": "9"}, "N", 5, minimum=1) == 9
    with pytest.raises(ConfigError):
        env_int({"N": "0"}, "N", 5, minimum=1)


def test_harness_config_combines_sections(tmp_path: Path) -> None:
    path = _write(
        tmp_path,
        "seed = 2\n\n[harness]\nepochs = 3\nk = [5]\n\n[harness_fsta]\nalpha = 0.5\n"
        "\n[fsta]\nalpha = 0.3\n",
    )

    cfg = load_config(path, env={}).harness_config()

    assert (cfg.epochs, cfg.k, cfg.seed) == (3, (5,), 2)
    assert cfg.fsta.alpha == 0.5
    assert cfg.transfer.aff_threshold == 0.025
    assert cfg.soft.k_s == 100.0
    assert cfg.gan.seed == 2


def test_echo_is_json_ready() -> None:
    echo = load_config(env={}).echo()

    assert echo["fsta"]["object_source"] == "mp-sampler"
    assert echo["eval"]["k"] == [50, 100]
    assert json.loads(json.dumps(echo)) == echo
