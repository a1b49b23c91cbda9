import pytest

from ssdistill.config import (
    dataclass_from_flat,
    format_flat,
    parse_flat_file,
    parse_override,
    resolve_flat,
)
from ssdistill.trainer import Phase1Config, Phase2Config


def test_parse_flat_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(
        "# comment\n"
        "\n"
        "phase1.margin = 0.3\n"
        "phase1.queue_size=256\n"
    )
    assert parse_flat_file(p) == {"phase1.margin": "0.3", "phase1.queue_size": "256"}


def test_parse_flat_file_rejects_garbage(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("just words\n")
    with pytest.raises(ValueError):
        parse_flat_file(p)


def test_parse_override():
    assert parse_override("phase2.distill_weight=0.01") == ("phase2.distill_weight", "0.01")
    with pytest.raises(ValueError):
        parse_override("no-equals-sign")


def test_format_round_trips(tmp_path):
    config = {"b.key": "2", "a.key": "1,2,3"}
    p = tmp_path / "out.cfg"
    p.write_text(format_flat(config))
    assert parse_flat_file(p) == config


def test_dataclass_defaults_survive_partial_flat():
    cfg = dataclass_from_flat(Phase1Config, {"phase1.margin": "0.25"}, "phase1")
    assert cfg.margin == 0.25
    assert cfg.queue_size == Phase1Config().queue_size
    assert cfg.temperature == Phase1Config().temperature


def test_dataclass_coercion():
    flat = {
        "phase1.lr_drop_epochs": "10,20",
        "phase1.queue_size": "128",
        "phase1.base_lr": "0.5",
        "phase1.schedule": "cosine",
    }
    cfg = dataclass_from_flat(Phase1Config, flat, "phase1")
    assert cfg.lr_drop_epochs == (10, 20)
    assert cfg.queue_size == 128
    assert cfg.base_lr == 0.5
    assert cfg.schedule == "cosine"


def test_tuple_field_empty_string_means_empty():
    cfg = dataclass_from_flat(Phase2Config, {"phase2.stage_taps": ""}, "phase2")
    assert cfg.stage_taps == ()


def test_bool_coercion():
    yes = dataclass_from_flat(Phase2Config, {"phase2.connector_norm": "false"}, "phase2")
    assert yes.connector_norm is False
    with pytest.raises(ValueError):
        dataclass_from_flat(Phase2Config, {"phase2.connector_norm": "maybe"}, "phase2")


def test_resolve_precedence():
    defaults = {"a": "1", "b": "1", "c": "1"}
    file_config = {"b": "2", "c": "2"}
    overrides = {"c": "3"}
    assert resolve_flat(defaults, file_config, overrides) == {"a": "1", "b": "2", "c": "3"}


def test_to_flat_round_trips_through_dataclass():
    cfg = Phase1Config(margin=0.1, queue_size=32, lr_drop_epochs=(5, 9), epochs=20)
    flat = {f"phase1.{k}": v for k, v in cfg.to_flat().items()}
    rebuilt = dataclass_from_flat(Phase1Config, flat, "phase1")
    assert rebuilt == cfg
