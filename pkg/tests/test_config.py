import json

import pytest

from panet.config import DEFAULTS, DESK_PRESET, RunConfig
from panet.errors import DataError, UsageError


def test_defaults_resolve():
    rc = RunConfig.resolve()
    assert rc.img_size == 64
    assert rc.base_channels == 16
    assert rc.depths == (1, 1, 2, 1)
    assert rc.epochs == 300
    assert rc.lr0 == 5e-4
    assert all(src == "default" for src in rc.sources.values())


def test_desk_preset_layer():
    rc = RunConfig.resolve(desk=True)
    for key, val in DESK_PRESET.items():
        assert getattr(rc, key) == val
        assert rc.sources[key] == "desk"
    assert rc.sources["img_size"] == "default"


def test_file_overrides_desk(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"epochs": 7, "margin": 0.5}))
    rc = RunConfig.resolve(config_file=cfg, desk=True)
    assert rc.epochs == 7
    assert rc.sources["epochs"] == "file"
    assert rc.margin == 0.5
    assert rc.lr0 == DESK_PRESET["lr0"]  # untouched by the file


def test_flags_override_everything(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"epochs": 7}))
    rc = RunConfig.resolve(config_file=cfg, desk=True, flags={"epochs": 3, "seed": 9})
    assert rc.epochs == 3
    assert rc.sources["epochs"] == "flag"
    assert rc.seed == 9
    assert rc.sources["seed"] == "flag"


def test_none_flags_are_skipped():
    rc = RunConfig.resolve(flags={"epochs": None, "lr0": None})
    assert rc.epochs == DEFAULTS["epochs"]
    assert rc.sources["epochs"] == "default"


def test_unknown_file_key_rejected(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"leerning_rate": 0.1}))
    with pytest.raises(DataError):
        RunConfig.resolve(config_file=cfg)


def test_unknown_flag_key_rejected():
    with pytest.raises(UsageError):
        RunConfig.resolve(flags={"bogus": 1})


def test_malformed_file_rejected(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text("{not json")
    with pytest.raises(DataError):
        RunConfig.resolve(config_file=cfg)
    cfg.write_text(json.dumps([1, 2]))
    with pytest.raises(DataError):
        RunConfig.resolve(config_file=cfg)
    with pytest.raises(DataError):
        RunConfig.resolve(config_file=tmp_path / "missing.json")


def test_depths_parse_from_flag_string():
    rc = RunConfig.resolve(flags={"depths": "1,1", "channel_multipliers": "1,2",
                                  "img_size": 32})
    assert rc.depths == (1, 1)
    assert rc.channel_multipliers == (1, 2)


def test_pooling_aliases():
    assert RunConfig.resolve(flags={"pooling": "gap"}).pooling == "gap_only"
    assert RunConfig.resolve(flags={"pooling": "gmp"}).pooling == "gmp_only"
    assert RunConfig.resolve(flags={"pooling": "both"}).pooling == "both"
    with pytest.raises(UsageError):
        RunConfig.resolve(flags={"pooling": "max"})


@pytest.mark.parametrize("field,value", [
    ("epochs", "ten"),
    ("epochs", 1.5),
    ("lr0", "fast"),
    ("depths", [1, "two"]),
    ("depths", []),
    ("topology", 3),
    ("epochs", True),
])
def test_type_coercion_rejections(field, value):
    with pytest.raises(UsageError):
        RunConfig.resolve(flags={field: value})


def test_resolution_validates_composite_configs():
    # geometry and schedule constraints surface at resolve time
    with pytest.raises(UsageError):
        RunConfig.resolve(flags={"img_size": 30})
    with pytest.raises(UsageError):
        RunConfig.resolve(flags={"batch_size": 12})  # p*k != 12


def test_to_json_lists_values_and_sources():
    rc = RunConfig.resolve(desk=True, flags={"seed": 4})
    blob = json.loads(rc.to_json())
    assert blob["config"]["seed"] == 4
    assert blob["sources"]["seed"] == "flag"
    assert blob["config"]["depths"] == [1, 1, 2, 1]
    assert set(blob["config"]) == set(DEFAULTS)


def test_backbone_and_train_views():
    rc = RunConfig.resolve(flags={"topology": "serial", "pooling": "gmp"})
    bc = rc.backbone_config()
    assert bc.mode == "serial"
    assert bc.pooling == "gmp_only"
    tc = rc.train_config()
    assert tc.lr0 == rc.lr0
    assert tc.seed == rc.seed
