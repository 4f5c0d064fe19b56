"""Strict config parsing: defaults, validation, echo round-trip."""

import pytest

from agcl.errors import ValidationError
from agcl.runconfig import load_config, parse_config_text

MINIMAL = """\
seed = 42
[phantom]
[sampling]
[model]
[stage1]
[stage2]
[eval]
"""


def test_minimal_config_fills_defaults():
    cfg = parse_config_text(MINIMAL)
    assert cfg.seed == 42
    assert cfg.phantom.height == 64
    assert cfg.phantom.n_objects == 4
    assert cfg.sampling_n_per_object == 8
    assert cfg.model.patch_size == 16
    assert cfg.stage1.loss == "agcl"
    assert cfg.stage1.temp == 0.1
    assert cfg.model.temperature == cfg.stage1.temp
    assert cfg.stage2.freeze_encoder is True
    assert cfg.eval.threshold == 0.5


def test_echo_round_trip_is_identity():
    text = MINIMAL + "\n"
    cfg = parse_config_text(text)
    echoed = cfg.echo_text()
    cfg2 = parse_config_text(echoed)
    assert cfg2 == cfg
    assert cfg2.echo_text() == echoed


def test_negative_temperature_names_key_and_line():
    bad = MINIMAL.replace("[stage1]", "[stage1]\ntemp = -1")
    with pytest.raises(ValidationError, match=r"\[stage1\].temp"):
        parse_config_text(bad, source="cfg.ini")
    try:
        parse_config_text(bad, source="cfg.ini")
    except ValidationError as err:
        assert "cfg.ini:6" in str(err)


def test_duplicate_key_rejected():
    bad = MINIMAL.replace("[stage1]", "[stage1]\nepochs = 3\nepochs = 4")
    with pytest.raises(ValidationError, match="duplicate"):
        parse_config_text(bad)


def test_unknown_key_rejected():
    bad = MINIMAL.replace("[model]", "[model]\nwingspan = 4")
    with pytest.raises(ValidationError, match=r"\[model\].wingspan"):
        parse_config_text(bad)


def test_unknown_section_rejected():
    with pytest.raises(ValidationError, match="unknown section"):
        parse_config_text(MINIMAL + "[mystery]\n")


def test_missing_seed_rejected():
    with pytest.raises(ValidationError, match="seed"):
        parse_config_text(MINIMAL.replace("seed = 42\n", ""))


def test_key_before_section_rejected():
    with pytest.raises(ValidationError, match="before sections"):
        parse_config_text("seed = 1\nepochs = 2\n" + MINIMAL[10:])


def test_bad_loss_kind_rejected():
    bad = MINIMAL.replace("[stage1]", "[stage1]\nloss = fancy")
    with pytest.raises(ValidationError, match="sscl|agcl"):
        parse_config_text(bad)


def test_modality_filter_forms():
    cfg = parse_config_text(
        MINIMAL.replace("[stage1]", "[stage1]\nmodality_filter = 1,2"))
    assert cfg.stage1.modality_filter == (1, 2)
    cfg = parse_config_text(
        MINIMAL.replace("[stage1]", "[stage1]\nmodality_filter = all"))
    assert cfg.stage1.modality_filter is None


def test_comments_and_blank_lines_ignored():
    text = "# leading comment\n\nseed = 7  # trailing\n" + MINIMAL[10:]
    assert parse_config_text(text).seed == 7


def test_intensity_matrix_parsing():
    text = MINIMAL.replace(
        "[phantom]",
        "[phantom]\nintensity_means = 0.3 0.5 0.7 0.9 | 0.2 0.4 0.6 0.8")
    cfg = parse_config_text(text)
    assert cfg.phantom.intensity_means == ((0.3, 0.5, 0.7, 0.9),
                                           (0.2, 0.4, 0.6, 0.8))


def test_missing_file_is_validation_error(tmp_path):
    with pytest.raises(ValidationError, match="does not exist"):
        load_config(tmp_path / "absent.ini")
