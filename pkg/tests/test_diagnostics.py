"""Tests for R-hat and effective sample size."""

import math

import numpy as np
import pytest

from lowfr.diagnostics import (
    DIVERGENCE_ROW,
    STATUS_CONSTANT,
    STATUS_OK,
    autocovariance,
    diagnose,
    diagnostics_table,
    ess,
    split_rhat,
)
from lowfr.errors import UsageError
from lowfr.sampler import PosteriorDraws


def _ar1(rng, chains, draws, rho):
    out = np.empty((chains, draws))
    out[:, 0] = rng.normal(size=chains)
    scale = math.sqrt(1.0 - rho**2)
    for i in range(1, draws):
        out[:, i] = rho * out[:, i - 1] + scale * rng.normal(size=chains)
    return out


def test_iid_draws(rng):
    """Test R-hat near one and ESS near the draw count for independent draws."""
    draws = rng.normal(size=(4, 1000))
    assert split_rhat(draws) < 1.01
    assert 2400 < ess(draws) < 6000
    assert 2000 < ess(draws, "tail") < 6000


def test_rhat_calibration_on_independent_chains():
    """Test that independent identically distributed chains almost never exceed 1.01."""
    values = [split_rhat(np.random.default_rng(seed).normal(size=(4, 1000))) for seed in range(200)]
    assert np.mean(np.asarray(values) < 1.01) >= 0.99


def test_anticorrelated_chain_is_super_efficient(rng):
    """Test that sign-alternating autocorrelation gives more effective draws than draws."""
    draws = _ar1(rng, 4, 1000, -0.5)
    total = draws.size
    value = ess(draws)
    assert total < value <= 10 * total
    # an AR(1) chain with rho = -0.5 has ESS = 3N
    assert value == pytest.approx(3 * total, rel=0.3)


def test_correlated_draws(rng):
    """Test that autocorrelation lowers the ESS."""
    draws = _ar1(rng, 4, 1000, 0.9)
    assert ess(draws) < 600
    assert split_rhat(draws) < 1.1


def test_shifted_chain(rng):
    """Test that a chain stuck elsewhere inflates R-hat."""
    draws = rng.normal(size=(4, 500))
    draws[0] += 3.0
    assert split_rhat(draws) > 1.1


def test_trending_chain(rng):
    """Test that split chains detect a trend within one chain."""
    draws = rng.normal(size=(2, 400)) + np.linspace(0.0, 6.0, 400)
    assert split_rhat(draws) > 1.1


def test_constant_parameter():
    """Test that constant draws give NaN diagnostics."""
    draws = np.full((2, 50), 0.7)
    assert math.isnan(split_rhat(draws))
    assert math.isnan(ess(draws))
    result = diagnose("sigma", draws)
    assert result.status == STATUS_CONSTANT
    assert result.mean == pytest.approx(0.7)
    assert math.isnan(result.ess_tail)


def test_input_errors(rng):
    """Test too few chains or draws and an unknown mode."""
    with pytest.raises(UsageError):
        split_rhat(rng.normal(size=(1, 100)))
    with pytest.raises(UsageError):
        ess(rng.normal(size=(2, 3)))
    with pytest.raises(UsageError):
        ess(rng.normal(size=(2, 100)), "median")
    with pytest.raises(UsageError):
        ess(rng.normal(size=(2, 3, 4)))


def test_single_chain(rng):
    """Test that one chain has an ESS but no R-hat."""
    result = diagnose("mu", rng.normal(size=200))
    assert result.status == STATUS_OK
    assert math.isnan(result.rhat)
    assert result.ess_bulk > 50


def test_autocovariance_lag_zero(rng):
    """Test that lag zero is the biased variance of each row."""
    ary = rng.normal(size=(3, 64))
    acov = autocovariance(ary)
    np.testing.assert_allclose(acov[:, 0], ary.var(axis=1))
    centered = ary - ary.mean(axis=1, keepdims=True)
    lag1 = np.sum(centered[:, 1:] * centered[:, :-1], axis=1) / 64
    np.testing.assert_allclose(acov[:, 1], lag1, atol=1e-12)


def test_diagnostics_table(rng):
    """Test one row per parameter plus the divergence row."""
    array = rng.normal(size=(2, 100, 2))
    array[:, :, 1] = 1.0
    draws = PosteriorDraws(["mu", "fixed"], array, stats={"divergent": np.ones((2, 100))})
    table = diagnostics_table(draws)
    assert table["parameter"].tolist() == ["mu", "fixed", DIVERGENCE_ROW]
    assert table.loc[1, "status"] == STATUS_CONSTANT
    assert table.loc[2, "mean"] == 200.0
    assert list(table.columns) == [
        "parameter",
        "mean",
        "sd",
        "rhat",
        "ess_bulk",
        "ess_tail",
        "status",
    ]
    assert diagnostics_table(draws, ["mu"])["parameter"].tolist() == ["mu", DIVERGENCE_ROW]
