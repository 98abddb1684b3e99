# =============================================================
# ImpactLens - Shared Test Fixtures
# Synthetic panels come from the generator with fixed seeds, so
# every suite sees the same data.
# =============================================================

import os
import sys
from datetime import date

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.design_builder import ModelSpec  # noqa: E402
from services.synth_generator import Intervention, SynthConfig, generate_panel  # noqa: E402

CUTOFF = date(2015, 3, 1)


def ar_spec(sales_lags: int = 2, license_lags: int = 1) -> ModelSpec:
    """Lags and an intercept only: matches the default generator."""
    return ModelSpec(
        sales_lags=sales_lags,
        license_lags=license_lags,
        use_day_of_week=False,
        use_holiday=False,
        use_week_of_year=False,
        use_day_of_year=False,
        use_linear_trend=False,
        use_quadratic_trend=False,
    )


@pytest.fixture(scope="session")
def synth_config() -> SynthConfig:
    return SynthConfig(n_days=500, start_date=date(2014, 1, 1), burn_in=100, seed=11)


@pytest.fixture(scope="session")
def synth_panel(synth_config):
    panel, _ = generate_panel(synth_config)
    return panel


@pytest.fixture(scope="session")
def spike_config() -> SynthConfig:
    """TAW rifle sales tripled for five days from the cutoff."""
    return SynthConfig(
        n_days=500,
        start_date=date(2014, 1, 1),
        burn_in=100,
        seed=23,
        intervention_date=CUTOFF,
        interventions=[Intervention(series="TAWRifle", start_offset=0, end_offset=4, factor=3.0, label="immediate")],
    )


@pytest.fixture(scope="session")
def spike_panel(spike_config):
    return generate_panel(spike_config)


@pytest.fixture
def spec() -> ModelSpec:
    return ar_spec()
