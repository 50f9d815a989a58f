import json

import pytest

from bprl.config import ConfigError, default_config, default_dict, from_dict, load_config
from bprl.errors import InvalidInputError


def test_defaults_round_trip(tmp_path):
    cfg = default_config()
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    again = load_config(path)
    assert again == cfg and again.hash() == cfg.hash()
    assert len(cfg.hash()) == 16


def test_missing_field_is_named():
    d = default_dict()
    del d["poison"]["rate"]
    with pytest.raises(ConfigError) as info:
        from_dict(d)
    assert info.value.path == "poison.rate"
    assert "missing" in str(info.value)


def test_unknown_key_is_named():
    d = default_dict()
    d["train"]["lrr"] = 0.1
    with pytest.raises(ConfigError, match=r"train\.lrr: unknown key"):
        from_dict(d)


@pytest.mark.parametrize("path,value", [
    ("poison.rate", 1.5),
    ("poison.rate", "0.05"),
    ("train.epochs", 0),
    ("train.momentum", 1.0),
    ("purify.method", "anp"),
    ("dataset.classes", 1),
    ("lmc.grid", 1),
    ("poison.target", 7),
    ("ra.n_poison", 1000),
    ("trigger.kind", "ssba"),
    ("train.batch", True),
])
def test_invalid_values(path, value):
    with pytest.raises(ConfigError):
        default_config().replace(**{path: value})


def test_patch_must_fit():
    with pytest.raises(ConfigError, match="patch"):
        default_config().replace(**{"trigger.kind": "patch", "trigger.patch_anchor": [14, 0]})


def test_replace_and_hash():
    cfg = default_config()
    other = cfg.replace(**{"purify.pam.rho": 0.0})
    assert other.purify.pam.rho == 0.0
    assert other.hash() != cfg.hash()
    assert cfg.replace(seed=0).hash() == cfg.hash()
    with pytest.raises(ConfigError):
        cfg.replace(**{"train.nope": 1})


def test_integer_literal_for_float_field():
    assert default_config().replace(**{"train.lr": 1}).train.lr == 1.0


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text(json.dumps([1]))
    with pytest.raises(InvalidInputError):
        load_config(tmp_path / "list.json")
