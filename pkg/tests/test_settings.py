# =============================================================
# ImpactLens - Configuration Tests
# =============================================================

import os
from datetime import date

import pytest

from config.settings import load_config
from services.effect_service import PRESET_WINDOWS
from services.errors import ConfigError

EXAMPLE_ENV = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), ".env.example")


def test_defaults_without_any_source():
    config = load_config(environ={})
    assert config.model.sales_lags == 28
    assert config.model.license_lags == 10
    assert config.model.time_effects == ("dow", "hol", "woy", "lin", "quad")
    assert config.bootstrap.replicates == 1000
    assert config.bootstrap.confidence == 0.95
    assert config.windows == PRESET_WINDOWS
    assert config.horizon == 36
    assert config.cutoff is None
    assert config.paths.output_dir == "impactlens-out"
    assert config.model.spec().label() == "dow+hol+woy+lin+quad|y28|z10"


def test_file_then_environment_then_overrides(tmp_path):
    env_file = tmp_path / "run.env"
    env_file.write_text("SEED=1\nCUTOFF=2016-06-12\nSALES_LAGS=7\nIMPACTLENS_LICENSE_LAGS=3\n")
    environ = {"IMPACTLENS_SEED": "2", "IMPACTLENS_SALES_LAGS": "9", "OTHER_SEED": "99"}
    config = load_config(str(env_file), overrides={"SEED": "3", "CUTOFF": None}, environ=environ)
    assert config.seed == 3
    assert config.model.sales_lags == 9
    assert config.model.license_lags == 3
    assert config.cutoff == date(2016, 6, 12)


def test_the_example_file_loads():
    config = load_config(EXAMPLE_ENV, environ={})
    assert config.cutoff == date(2016, 6, 12)
    assert [w.label for w in config.windows] == ["immediate", "short-run", "extended"]
    assert config.paths.holidays is None


def test_empty_values_fall_back_to_defaults():
    config = load_config(environ={"IMPACTLENS_HORIZON": "", "IMPACTLENS_SEED": ""})
    assert config.horizon == 36
    assert config.seed == 0


def test_custom_windows_set_default_horizon():
    config = load_config(environ={"IMPACTLENS_WINDOWS": "first:0-2, later:3-9"})
    assert [(w.label, w.start_offset, w.end_offset) for w in config.windows] == [("first", 0, 2), ("later", 3, 9)]
    assert config.horizon == 10


@pytest.mark.parametrize("key, value", [
    ("SEED", "seven"),
    ("BOOTSTRAP_REPS", "1"),
    ("CV_FOLDS", "1"),
    ("CONFIDENCE", "1.5"),
    ("RATIO_COVERAGE", "0"),
    ("CUTOFF", "12/06/2016"),
    ("AUTO_SELECT", "maybe"),
    ("TIME_EFFECTS", "dow,monthly"),
    ("WINDOWS", "immediate:4-0"),
    ("HORIZON", "10"),
])
def test_invalid_values_raise_config_error(key, value):
    with pytest.raises(ConfigError) as exc:
        load_config(environ={f"IMPACTLENS_{key}": value})
    assert exc.value.stage == "config"


def test_conflicting_time_effects_fail_when_building_spec():
    config = load_config(environ={"IMPACTLENS_TIME_EFFECTS": "dow,woy,doy"})
    with pytest.raises(ConfigError):
        config.model.spec()


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.env", environ={})


def test_as_dict_is_plain():
    config = load_config(environ={"IMPACTLENS_CUTOFF": "2016-06-12"})
    data = config.as_dict()
    assert data["cutoff"] == "2016-06-12"
    assert data["windows"][0] == "immediate:0-4"
    assert data["model"]["time_effects"] == ["dow", "hol", "woy", "lin", "quad"]


def test_holdout_must_end_before_cutoff():
    environ = {"IMPACTLENS_CUTOFF": "2016-06-12", "IMPACTLENS_HOLDOUT_HORIZON": "10"}
    ok = load_config(environ={**environ, "IMPACTLENS_HOLDOUT_CUTOFF": "2016-06-02"})
    assert ok.holdout_cutoff == date(2016, 6, 2)
    with pytest.raises(ConfigError, match="HOLDOUT_CUTOFF"):
        load_config(environ={**environ, "IMPACTLENS_HOLDOUT_CUTOFF": "2016-06-03"})


def test_covariate_paths_are_a_list():
    config = load_config(environ={"IMPACTLENS_COVARIATES_PATH": "income.csv, demographics.csv"})
    assert config.paths.covariates == ("income.csv", "demographics.csv")
    assert config.as_dict()["paths"]["covariates"] == ["income.csv", "demographics.csv"]
    assert load_config(environ={}).paths.covariates == ()
