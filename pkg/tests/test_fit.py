"""Tests for fit orchestration and fit directories."""

import json

import numpy as np
import pytest

from lowfr.const import FILE_DRAWS, FILE_MODEL, FILE_STANDARDIZATION, SIM_K
from lowfr.data import ExposureDataset
from lowfr.diagnostics import split_rhat
from lowfr.effects import MetricsRow, covariate_effects, crossval, evaluate_metrics, ppc
from lowfr.errors import InputError, UsageError
from lowfr.fit import (
    FitOptions,
    ModelKind,
    fit_model,
    options_from_record,
    options_record,
    prepare_fit,
    read_fit,
    write_fit,
)
from lowfr.induced import Group
from lowfr.model import Variant
from lowfr.sampler import SamplerConfig
from lowfr.simgen import gen_intro, simulate


@pytest.fixture
def quick():
    """Return sampler settings for end-to-end fits."""
    return SamplerConfig(chains=2, warmup=30, samples=10, seed=11, max_treedepth=4)


@pytest.fixture
def lowfr_fit(raw_data, quick):
    """Return a one-factor joint-model fit of the small dataset."""
    return fit_model(raw_data, FitOptions(k=1, sampler=quick, jobs=1))


def test_option_checks():
    """Test the rejected option combinations and the variant mapping."""
    with pytest.raises(UsageError):
        FitOptions(model="cqr", sex_col="sex", sex_interactions=True)
    with pytest.raises(UsageError):
        FitOptions(sex_interactions=True)
    assert FitOptions(model="direct").model is ModelKind.DIRECT
    assert FitOptions(model="direct").variant is Variant.DIRECT
    assert FitOptions(model="cqr").variant is Variant.LOWFR
    assert FitOptions(sex_col="sex", sex_interactions=True).variant is Variant.LOWFR_SEX_INT


def test_options_record_round_trip(quick):
    """Test the JSON-ready description of fit options."""
    options = FitOptions(model=ModelKind.DIRECT, rank=2, sex_col="sex", sampler=quick)
    record = options_record(options)
    assert record["model"] == "direct"
    assert record["sampler"]["warmup"] == 30
    assert options_from_record(json.loads(json.dumps(record))) == options
    with pytest.raises(InputError):
        options_from_record({"model": "lowfr"})
    with pytest.raises(InputError):
        options_from_record({**record, "model": "spline"})


def test_prepare_selects_k(raw_data):
    """Test that an unset factor count is chosen from the data."""
    prepared = prepare_fit(raw_data, FitOptions())
    assert prepared.options.k is not None
    assert prepared.spec.k == prepared.options.k
    assert 1 <= prepared.spec.k <= raw_data.p * raw_data.T
    assert prepared.spec.n_missing == 2
    assert prepared.record is not None


def test_prepare_regressions_impute(raw_data):
    """Test that the regressions see mean-imputed exposures."""
    direct = prepare_fit(raw_data, FitOptions(model="direct", rank=1))
    assert direct.data.n_missing == 0
    assert direct.spec.n_missing == 0
    cqr = prepare_fit(raw_data, FitOptions(model="cqr", standardize=False))
    assert cqr.design is not None
    assert cqr.record is None
    assert cqr.data.x[2, 1, 0] == pytest.approx(np.nanmean(raw_data.x[:, 1, 0]))


def test_lowfr_fit(lowfr_fit, raw_data):
    """Test the draws and the induced coefficients of a joint-model fit."""
    assert lowfr_fit.n_draws == 20
    assert lowfr_fit.labels == ["lead_t1", "lead_t2", "zinc_t1", "zinc_t2", "pm25_t1", "pm25_t2"]
    induced = lowfr_fit.induced()
    assert len(induced) == 20
    assert induced.gamma.shape == (20, 6, 6)
    np.testing.assert_allclose(induced.gamma, induced.gamma.transpose(0, 2, 1))
    with pytest.raises(UsageError):
        lowfr_fit.induced(Group.FLAGGED)

    assert lowfr_fit.conditional_means().shape == (20, raw_data.n)
    prediction = lowfr_fit.predict_mean(raw_data)
    assert prediction.shape == (raw_data.n,)
    assert np.all(np.isfinite(prediction))


def test_imputed_frame(lowfr_fit):
    """Test posterior summaries of the two missing exposure values."""
    frame = lowfr_fit.imputed_frame()
    assert frame["id"].tolist() == ["3", "6"]
    assert frame["exposure"].tolist() == ["zinc", "lead"]
    assert frame["time"].tolist() == [1, 2]
    assert np.all(frame["lo95"] <= frame["mean"])
    assert np.all(frame["mean"] <= frame["hi95"])
    assert "mean_original" in frame.columns


def test_imputed_frame_needs_missing_values(complete_data, quick):
    """Test that fits without imputed values refuse the table."""
    fit = fit_model(complete_data, FitOptions(model="cqr", sampler=quick, jobs=1))
    with pytest.raises(UsageError):
        fit.imputed_frame()
    with pytest.raises(UsageError):
        fit.induced("flagged")


@pytest.mark.parametrize("model", ["cqr", "direct"])
def test_regression_prediction_matches_fitted_means(raw_data, quick, model):
    """Test that predicting the training subjects reproduces the fitted means."""
    fit = fit_model(raw_data, FitOptions(model=model, sampler=quick, jobs=1))
    assert fit.noise_variance().shape == (20,)
    fitted = fit.record.unstandardize_y(fit.conditional_means().mean(axis=0))
    np.testing.assert_allclose(fit.predict_mean(raw_data), fitted, rtol=1e-8, atol=1e-8)


def test_direct_induced_is_linear(complete_data, quick):
    """Test that the direct regression has no interaction surface."""
    fit = fit_model(complete_data, FitOptions(model="direct", rank=1, sampler=quick, jobs=1))
    induced = fit.induced()
    assert not induced.gamma.any()
    theta = induced.alpha.reshape(-1, complete_data.p, complete_data.T)
    assert np.all(np.linalg.matrix_rank(theta, tol=1e-10) <= 1)


def test_sex_interaction_groups(raw_data, quick):
    """Test that the two groups share Gamma and predictions use each subject's group."""
    options = FitOptions(k=1, sex_col="sex", sex_interactions=True, sampler=quick, jobs=1)
    fit = fit_model(raw_data, options)
    reference = fit.induced(Group.REFERENCE)
    flagged = fit.induced(Group.FLAGGED)
    np.testing.assert_allclose(reference.gamma, flagged.gamma)
    assert np.all(np.isfinite(fit.predict_mean(raw_data)))


def test_write_and_read_fit(lowfr_fit, raw_data, tmp_path):
    """Test that a fit directory reopens with identical draws."""
    write_fit(lowfr_fit, raw_data, tmp_path)
    for name in (FILE_DRAWS, FILE_MODEL, FILE_STANDARDIZATION):
        assert (tmp_path / name).is_file()
    description = json.loads((tmp_path / FILE_MODEL).read_text())
    assert description["variant"] == "lowfr"

    restored = read_fit(tmp_path)
    assert options_record(restored.options) == options_record(lowfr_fit.options)
    assert restored.draws.names == lowfr_fit.draws.names
    np.testing.assert_array_equal(restored.draws.array, lowfr_fit.draws.array)
    np.testing.assert_allclose(restored.data.y, lowfr_fit.data.y)


def test_read_fit_mismatch(lowfr_fit, raw_data, tmp_path):
    """Test that draws of another model are rejected."""
    write_fit(lowfr_fit, raw_data, tmp_path)
    description = json.loads((tmp_path / FILE_MODEL).read_text())
    description["k"] = 2
    (tmp_path / FILE_MODEL).write_text(json.dumps(description))
    with pytest.raises(InputError):
        read_fit(tmp_path)

    (tmp_path / FILE_MODEL).write_text("{not json")
    with pytest.raises(InputError):
        read_fit(tmp_path)


def test_predictive_check(lowfr_fit, raw_data):
    """Test replicate shapes, seeding and the original scale."""
    check = ppc(lowfr_fit, seed=1)
    assert check.replicates.shape == (20, raw_data.n)
    np.testing.assert_array_equal(check.replicates, ppc(lowfr_fit, seed=1).replicates)
    assert not np.array_equal(check.replicates, ppc(lowfr_fit, seed=2).replicates)
    original = ppc(lowfr_fit, seed=1, original_scale=True)
    np.testing.assert_allclose(original.observed, raw_data.y)
    assert len(original.per_subject()) == raw_data.n


def test_covariate_effects(lowfr_fit):
    """Test one summary per covariate."""
    (summary,) = covariate_effects(lowfr_fit)
    assert summary.label == "covariate:sex"
    assert summary.lower <= summary.mean <= summary.upper


def test_crossval(complete_data, quick):
    """Test the per-fold and pooled out-of-sample errors."""
    options = FitOptions(model="direct", sex_col="sex", sampler=quick, jobs=1)
    result = crossval(complete_data, options, folds=2, seed=0)
    assert result.folds.shape == (complete_data.n,)
    assert result.fold_mse.shape == (2,)
    assert np.all(result.fold_mse > 0)
    assert result.mse == pytest.approx(result.fold_mse.mean())


def _alpha_mse(result, truth):
    return float(np.mean((result.induced().alpha.mean(axis=0) - truth.alpha) ** 2))


@pytest.mark.slow
def test_low_rank_regression_beats_unstructured():
    """Test that the rank-one regression estimates rank-one coefficients best."""
    sampler = SamplerConfig(chains=2, warmup=300, samples=300, seed=1)
    low, full = [], []
    for seed in range(3):
        data, truth = gen_intro(1, n=200, seed=seed)
        for rank, store in ((1, low), (None, full)):
            options = FitOptions(model="direct", rank=rank, standardize=False, sampler=sampler)
            store.append(_alpha_mse(fit_model(data, options), truth))
    assert np.median(low) < np.median(full)
    assert np.median(low) < 0.03


@pytest.mark.slow
def test_imputation_intervals_cover_masked_values():
    """Test that imputed exposures cover the values that were masked out."""
    data, _ = simulate("s1", seed=3)
    gen = np.random.default_rng(5)
    hidden = gen.uniform(size=data.x.shape) < 0.1
    masked = ExposureDataset.from_arrays(
        data.y, np.where(hidden, np.nan, data.x), exposure_names=data.exposure_names
    )
    sampler = SamplerConfig(chains=2, warmup=500, samples=500, seed=2)
    fit = fit_model(masked, FitOptions(sampler=sampler))
    frame = fit.imputed_frame()
    i, j, t = masked.missing_index().T
    truth = data.x[i, j, t]
    inside = (frame["lo95_original"] <= truth) & (truth <= frame["hi95_original"])
    assert inside.mean() >= 0.85


@pytest.mark.slow
def test_predictive_intervals_are_calibrated():
    """Test that about 95% of observed outcomes fall inside their predictive intervals."""
    data, _ = simulate("s1", seed=4)
    sampler = SamplerConfig(chains=2, warmup=500, samples=500, seed=6)
    fit = fit_model(data, FitOptions(k=SIM_K, sampler=sampler))
    inside = ppc(fit, seed=1, original_scale=True).per_subject()["inside"]
    assert 0.90 <= inside.mean() <= 0.99


@pytest.mark.slow
def test_crossval_error_close_to_in_sample():
    """Test that the out-of-sample error stays within twice the in-sample error."""
    data, _ = simulate("s1", seed=8)
    sampler = SamplerConfig(chains=2, warmup=300, samples=300, seed=2)
    options = FitOptions(k=SIM_K, sampler=sampler)
    in_sample = float(np.mean((data.y - fit_model(data, options).predict_mean(data)) ** 2))
    result = crossval(data, options, folds=5, seed=0)
    assert result.mse <= 2.0 * in_sample


@pytest.mark.slow
def test_scenario_one_benchmark():
    """Test estimation accuracy and mixing on three replicates of the first scenario."""
    sampler = SamplerConfig(chains=4, warmup=500, samples=500, seed=3)
    rows = []
    for seed in range(3):
        data, truth = simulate("s1", seed=seed)
        fit = fit_model(data, FitOptions(k=SIM_K, standardize=False, sampler=sampler))
        induced = fit.induced()
        rows.append(evaluate_metrics(induced, truth))
        alpha = induced.alpha.reshape(sampler.chains, sampler.samples, -1)
        assert max(split_rhat(alpha[:, :, i]) for i in range(alpha.shape[2])) < 1.05
    average = MetricsRow.average("lowfr", rows)
    assert average.main_mse < 5e-3
    assert average.int_mse < 5e-4
    assert average.main_coverage >= 0.95
