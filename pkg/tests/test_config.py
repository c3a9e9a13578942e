import json
from fractions import Fraction

import pytest

from mvsrefine.config import ConfigError, RefineConfig, StageConfig, default_stages


def test_default_stage_configuration():
    cfg = RefineConfig()
    assert [s.base_scale for s in cfg.stages] == [Fraction(1, 8), Fraction(1, 4), Fraction(1, 4)]
    assert [s.fine_scale for s in cfg.stages] == [Fraction(1, 4), Fraction(1, 2), Fraction(1)]
    assert cfg.n_full == 128 and all(s.m == 4 and s.iterations == 4 for s in cfg.stages)
    assert cfg.dilations == (1, 3)
    assert cfg.stages[0].schedule == ("I", "S", "I", "S")


def test_json_round_trip(tmp_path):
    cfg = RefineConfig(mode="expectation", use_geometry=False, seed=7, n_full=64)
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    back = RefineConfig.load(p)
    assert back.to_dict() == cfg.to_dict()


def test_unknown_key_and_missing_version():
    d = RefineConfig().to_dict()
    with pytest.raises(ConfigError):
        RefineConfig.from_dict({**d, "bogus": 1})
    d.pop("schema_version")
    with pytest.raises(ConfigError):
        RefineConfig.from_dict(d)


def test_parse_error_names_file_and_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "n_full": 12,\n  oops\n}')
    with pytest.raises(ConfigError, match=r"bad\.json:3"):
        RefineConfig.load(p)


@pytest.mark.parametrize("kw", [dict(mode="median"), dict(features="sift"), dict(n_full=1), dict(stages=[]),
                                dict(alpha=0.0), dict(schema_version=2)])
def test_invalid_values(kw):
    with pytest.raises(ConfigError):
        RefineConfig(**kw)


def test_stage_validation():
    with pytest.raises(ConfigError):
        StageConfig("1/4", "1/8")
    with pytest.raises(ConfigError):
        StageConfig("1/2", "1")
    with pytest.raises(ConfigError):
        StageConfig("1/8", "1/4", m=0)
    with pytest.raises(ConfigError):
        RefineConfig(stages=[StageConfig("1/4", "1/2"), StageConfig("1/8", "1/4")])
    assert not StageConfig("1/4", "1/4").has_fine
    assert not StageConfig("1/4", "1", pyramid=False).has_fine


def test_feature_scales():
    assert RefineConfig().feature_scales == [Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8)]
    assert RefineConfig(stages=default_stages()[:1]).feature_scales == [Fraction(1, 4), Fraction(1, 8)]


def test_to_json_is_valid_json():
    assert json.loads(RefineConfig().to_json())["schema_version"] == 1
