"""Tests for effect summaries, predictive checks, folds and metrics."""

import math

import numpy as np
import pytest

from lowfr.effects import (
    ALL,
    INTERACTION,
    MAIN,
    CrossValResult,
    EffectSummary,
    MetricsRow,
    PredictiveCheck,
    contrast_values,
    cumulative_effect,
    difference_draws,
    evaluate_metrics,
    exposure_cumulative,
    fold_assignment,
    main_contrast,
    ppc,
    regression_surface,
    summaries_frame,
    summarize_effects,
)
from lowfr.errors import AlignmentError, ConfigurationError, UsageError
from lowfr.fit import FitOptions, FitResult, ModelKind
from lowfr.induced import InducedCoefficients, InducedDraws
from lowfr.model import ModelSpec, Variant, build_layout, prior_sample
from lowfr.sampler import PosteriorDraws
from lowfr.simgen import SimTruth

LABELS = ["a_t1", "a_t2", "b_t1", "b_t2"]


@pytest.fixture
def draws(rng):
    """Return 200 draws of a two-exposure, two-time surface."""
    size = 200
    alpha = np.array([1.0, 0.5, -1.0, 0.0]) + 0.1 * rng.normal(size=(size, 4))
    root = 0.2 * rng.normal(size=(size, 4, 4))
    gamma = 0.5 * (root + root.transpose(0, 2, 1))
    return InducedDraws(list(LABELS), rng.normal(size=size), alpha, gamma)


def test_summary_from_draws():
    """Test the mean, type-7 quantiles and the zero check."""
    summary = EffectSummary.from_draws("x", np.arange(1.0, 102.0))
    assert summary.mean == pytest.approx(51.0)
    assert summary.lower == pytest.approx(3.5)
    assert summary.upper == pytest.approx(98.5)
    assert summary.excludes_zero

    straddling = EffectSummary.from_draws("y", np.linspace(-1.0, 1.0, 50))
    assert not straddling.excludes_zero
    with pytest.raises(UsageError):
        EffectSummary.from_draws("z", [])


def test_summary_constant_draws():
    """Test that constant draws give a degenerate interval around the mean."""
    summary = EffectSummary.from_draws("c", np.full(120, 0.1))
    assert summary.lower <= summary.mean <= summary.upper
    assert summary.upper - summary.lower < 1e-12
    assert summary.excludes_zero


def test_summaries_frame(draws):
    """Test the tabular layout."""
    frame = summaries_frame(summarize_effects(draws, MAIN))
    assert list(frame.columns) == ["label", "mean", "lo95", "hi95", "excludes_zero"]
    assert frame["label"].tolist() == [f"main:{label}" for label in LABELS]


def test_summarize_selectors(draws):
    """Test counts and labels of every selector."""
    assert len(summarize_effects(draws, MAIN)) == 4
    inter = summarize_effects(draws, INTERACTION)
    assert len(inter) == 10
    assert inter[0].label == "interaction:a_t1:a_t1"
    assert inter[3].label == "interaction:a_t1:b_t2"
    assert len(summarize_effects(draws, ALL)) == 14

    (one,) = summarize_effects(draws, (1, 0))
    assert one.label == "main:b_t1"
    assert one.mean == pytest.approx(draws.alpha[:, 2].mean())
    (pair,) = summarize_effects(draws, (1, 1, 0, 0))
    assert pair.label == "interaction:a_t1:b_t2"
    assert pair.mean == pytest.approx(draws.gamma[:, 0, 3].mean())


@pytest.mark.parametrize("selector", ["quadratic", (0,), (0, 5), (2, 0)])
def test_summarize_bad_selector(draws, selector):
    """Test unknown selectors and out-of-range coordinates."""
    with pytest.raises(UsageError):
        summarize_effects(draws, selector)


def test_few_draws_warn(draws, caplog):
    """Test the warning for short draw tables."""
    short = InducedDraws(LABELS, draws.alpha0[:10], draws.alpha[:10], draws.gamma[:10])
    summarize_effects(short, MAIN)
    assert "Only 10 draws" in caplog.text


def test_contrast_matches_surface(draws):
    """Test the contrast against explicit evaluations of E[y | x]."""
    subset = [(0, 1), (1, 0)]
    values = contrast_values(draws, subset, lo=0.0, hi=2.0)
    d = np.array([0.0, 2.0, 2.0, 0.0])
    for s in (0, 57, 199):
        coefs = draws.draw(s)
        assert values[s] == pytest.approx(coefs.mean(d) - coefs.mean(np.zeros(4)))


def test_cumulative_effect(draws):
    """Test that the symmetric contrast is twice the summed main effects."""
    summary = cumulative_effect(draws, [(0, 0), (0, 1)])
    assert summary.label == "cumulative:a_t1+a_t2"
    assert summary.mean == pytest.approx(2.0 * draws.alpha[:, :2].sum(axis=1).mean())
    named = exposure_cumulative(draws, 1, "b")
    assert named.label == "cumulative:b"
    assert named.mean == pytest.approx(2.0 * draws.alpha[:, 2:].sum(axis=1).mean())
    with pytest.raises(UsageError):
        cumulative_effect(draws, [])


def test_main_contrast(draws):
    """Test that the unit-width contrast equals the main effect."""
    summary = main_contrast(draws, 0, 1)
    assert summary.label == "contrast:a_t2"
    assert summary.mean == pytest.approx(draws.alpha[:, 1].mean())


def test_regression_surface(draws):
    """Test one grid point against the coefficients of every draw."""
    grid = np.array([-1.0, 0.0, 1.5])
    frame = regression_surface(draws, [(0, 0), (0, 1)], [(1, 1)], grid)
    assert list(frame.columns) == ["u", "v", "mean", "lo", "hi", "excludes_zero"]
    assert len(frame) == 9
    row = frame[(frame["u"] == 1.5) & (frame["v"] == -1.0)].iloc[0]
    x = np.array([1.5, 1.5, 0.0, -1.0])
    expected = np.mean([draws.draw(s).mean(x) - draws.alpha0[s] for s in range(len(draws))])
    assert row["mean"] == pytest.approx(expected)
    origin = frame[(frame["u"] == 0.0) & (frame["v"] == 0.0)].iloc[0]
    assert origin["mean"] == 0.0
    assert not origin["excludes_zero"]

    with_intercept = regression_surface(draws, [(0, 0)], [(1, 0)], grid, include_intercept=True)
    origin = with_intercept[(with_intercept["u"] == 0.0) & (with_intercept["v"] == 0.0)]
    assert origin["mean"].iloc[0] == pytest.approx(draws.alpha0.mean())


def test_regression_surface_errors(draws):
    """Test overlapping and empty axes."""
    with pytest.raises(UsageError):
        regression_surface(draws, [(0, 0)], [(0, 0), (1, 0)], [0.0])
    with pytest.raises(UsageError):
        regression_surface(draws, [], [(1, 0)], [0.0])


def test_difference_draws(draws):
    """Test draw-wise differences and alignment checks."""
    diff = difference_draws(draws, draws)
    assert not diff.alpha.any()
    short = InducedDraws(LABELS, draws.alpha0[:5], draws.alpha[:5], draws.gamma[:5])
    with pytest.raises(AlignmentError):
        difference_draws(draws, short)


def test_predictive_check():
    """Test per-subject intervals and marginal p-values."""
    replicates = np.tile(np.linspace(-2.0, 2.0, 101)[:, None], (1, 3))
    check = PredictiveCheck(("1", "2", "3"), np.array([0.0, 5.0, -1.0]), replicates)
    frame = check.per_subject()
    assert list(frame.columns) == ["id", "y", "mean", "lo95", "hi95", "inside"]
    assert frame["inside"].tolist() == [True, False, True]
    assert frame["lo95"].iloc[0] == pytest.approx(-1.9)
    assert check.pooled().shape == (303,)
    pooled = check.pooled_frame()
    assert pooled["id"].tolist()[:4] == ["1", "2", "3", "1"]
    assert pooled["draw"].tolist()[2:4] == [1, 2]
    assert pooled["y_rep"].iloc[3] == pytest.approx(-1.96)

    marginal = check.marginal().set_index("check")
    assert list(marginal.index) == ["mean", "sd", "median", "min", "max"]
    assert marginal.loc["max", "observed"] == 5.0
    assert marginal.loc["max", "p_value"] == 0.0
    above = float(np.mean(np.linspace(-2.0, 2.0, 101) > -1.0))
    assert marginal.loc["min", "p_value"] == pytest.approx(above)


def _direct_fit(data, sigma2_y, size=400):
    spec = ModelSpec.for_data(data, Variant.DIRECT)
    layout = build_layout(spec)
    flat = layout.constrained_flat(prior_sample(spec, 0))
    names = layout.names()
    flat[names.index("sigma2_y")] = sigma2_y
    array = np.tile(flat, (1, size, 1))
    options = FitOptions(model=ModelKind.DIRECT, standardize=False)
    return FitResult(options, data, PosteriorDraws(names, array), spec=spec)


def test_predictive_width_scales_with_noise(complete_data):
    """Test that quadrupling the noise variance doubles every predictive interval."""
    narrow = ppc(_direct_fit(complete_data, 0.5), seed=11).per_subject()
    wide = ppc(_direct_fit(complete_data, 2.0), seed=11).per_subject()
    np.testing.assert_allclose(
        wide["hi95"] - wide["lo95"], 2.0 * (narrow["hi95"] - narrow["lo95"]), rtol=1e-9
    )

    fit = _direct_fit(complete_data, 1e-12)
    means = fit.conditional_means()[0]
    np.testing.assert_allclose(wide["mean"] - means, 2.0 * (narrow["mean"] - means), atol=1e-9)

    collapsed = ppc(fit, seed=11).per_subject()
    np.testing.assert_allclose(collapsed["lo95"], means, atol=1e-5)
    np.testing.assert_allclose(collapsed["hi95"], means, atol=1e-5)


def test_fold_assignment():
    """Test determinism, balance and the fold-size checks."""
    folds = fold_assignment(23, 5, seed=1)
    assert np.array_equal(folds, fold_assignment(23, 5, seed=1))
    assert not np.array_equal(folds, fold_assignment(23, 5, seed=2))
    counts = np.bincount(folds)
    assert counts.tolist() == sorted(counts.tolist(), reverse=True)
    assert counts.min() >= 4 and counts.max() <= 5
    with pytest.raises(ConfigurationError):
        fold_assignment(10, 1)
    with pytest.raises(ConfigurationError):
        fold_assignment(7, 4)


def test_crossval_frame():
    """Test the per-fold and pooled rows."""
    result = CrossValResult(np.array([0, 1, 0, 1]), np.array([1.0, 3.0]), 2.0)
    frame = result.to_frame("cqr")
    assert frame["fold"].tolist() == [1, 2, "pooled"]
    assert frame["mse"].tolist() == [1.0, 3.0, 2.0]
    assert set(frame["model"]) == {"cqr"}


def _exact_draws(truth, order, size=120):
    alpha = np.tile(truth.alpha[order], (size, 1))
    gamma = np.tile(truth.gamma[np.ix_(order, order)], (size, 1, 1))
    labels = [truth.labels[i] for i in order]
    return InducedDraws(labels, np.zeros(size), alpha, gamma)


def test_metrics_exact_posterior():
    """Test metrics of draws concentrated on the truth, in shuffled label order."""
    gamma = np.zeros((4, 4))
    gamma[0, 3] = gamma[3, 0] = 0.2
    coefs = InducedCoefficients(0.0, np.array([0.5, 0.0, -1.0, 0.0]), gamma)
    truth = SimTruth("s3", list(LABELS), coefs)
    row = evaluate_metrics(_exact_draws(truth, [2, 0, 3, 1]), truth, "lowfr")
    assert row.model == "lowfr"
    assert row.main_mse == pytest.approx(0.0)
    assert row.int_mse == pytest.approx(0.0)
    assert row.main_coverage == 1.0
    assert row.int_coverage == 1.0
    assert row.main_tp == 1.0
    assert row.main_tn == 1.0
    assert row.ce_mse == pytest.approx(0.0)
    assert row.ce_tp == 1.0
    assert math.isnan(row.ce_tn)


def test_metrics_shifted_posterior():
    """Test mean squared error and coverage of a biased, confident posterior."""
    truth = SimTruth("s3", list(LABELS), InducedCoefficients(0.0, np.ones(4), np.zeros((4, 4))))
    draws = _exact_draws(truth, [0, 1, 2, 3])
    draws.alpha += 0.5
    row = evaluate_metrics(draws, truth, "cqr")
    assert row.main_mse == pytest.approx(0.25)
    assert row.main_coverage == 0.0
    assert row.main_tp == 1.0
    assert math.isnan(row.main_tn)
    assert row.int_coverage == 1.0
    assert row.ce_mse == pytest.approx(4.0)


def test_metrics_label_mismatch(draws):
    """Test that different coordinates cannot be compared."""
    coefs = InducedCoefficients(0.0, np.zeros(4), np.zeros((4, 4)))
    truth = SimTruth("s3", ["a_t1", "a_t2", "c_t1", "c_t2"], coefs)
    with pytest.raises(AlignmentError):
        evaluate_metrics(draws, truth)


def test_metrics_average():
    """Test the field-wise average that skips undefined rates."""
    nan = math.nan
    rows = [
        MetricsRow("m", 1.0, 2.0, 1.0, 0.5, 1.0, nan, 0.1, 1.0, 1.0, nan),
        MetricsRow("m", 3.0, 4.0, 0.0, 0.5, 0.0, 1.0, 0.3, 0.0, 1.0, nan),
    ]
    mean = MetricsRow.average("m", rows)
    assert mean.main_mse == 2.0
    assert mean.main_tn == 1.0
    assert math.isnan(mean.ce_tn)
    with pytest.raises(UsageError):
        MetricsRow.average("m", [])
