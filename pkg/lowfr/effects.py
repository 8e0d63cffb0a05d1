"""Posterior effect summaries, predictive checks, cross-validation and metrics.

All effects are computed on the induced regression surface
E[y | x] = alpha0 + alpha'x + x' Gamma x, with exposure coordinates ordered
exposure-major (index j*T + t). Intervals are equal-tailed with type-7
(linear interpolation) quantiles.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields
import enum
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd
from sklearn.model_selection import KFold

from .const import DEFAULT_FOLDS, INTERVAL_LEVEL, MIN_SUMMARY_DRAWS
from .data import ExposureDataset
from .errors import AlignmentError, ConfigurationError, UsageError
from .fit import FitOptions, FitResult, ModelKind, fit_model
from .induced import InducedDraws
from .simgen import SimTruth, truth_cumulative

_LOGGER = logging.getLogger(__name__)

MAIN = "main"
INTERACTION = "interaction"
ALL = "all"

Coordinate = tuple[int, int]


@dataclass(frozen=True)
class EffectSummary:
    """Posterior mean and equal-tailed interval of one effect."""

    label: str
    mean: float
    lower: float
    upper: float
    excludes_zero: bool

    @classmethod
    def from_draws(
        cls, label: str, values: ArrayLike, level: float = INTERVAL_LEVEL
    ) -> EffectSummary:
        """Summarize a vector of draws.

        Raises:
            UsageError: If there are no draws

        """
        arr = np.asarray(values, dtype=float).ravel()
        if arr.size == 0:
            raise UsageError(f"No draws to summarize for {label}")
        tail = (1.0 - level) / 2.0
        lower, upper = np.quantile(arr, [tail, 1.0 - tail], method="linear")
        mean = float(arr.mean())
        # constant draws: keep lower <= mean <= upper despite round-off
        lower, upper = min(float(lower), mean), max(float(upper), mean)
        return cls(label, mean, lower, upper, not lower <= 0.0 <= upper)


def summaries_frame(summaries: Iterable[EffectSummary]) -> pd.DataFrame:
    """effects.csv layout: label, mean, lo95, hi95, excludes_zero."""
    frame = pd.DataFrame([asdict(s) for s in summaries])
    return frame.rename(columns={"lower": "lo95", "upper": "hi95"})


def _check_draws(draws: InducedDraws) -> None:
    if len(draws) == 0:
        raise UsageError("No draws to summarize")
    if len(draws) < MIN_SUMMARY_DRAWS:
        _LOGGER.warning(
            "Only %d draws; intervals need at least %d to be reliable",
            len(draws),
            MIN_SUMMARY_DRAWS,
        )


def _coordinate(draws: InducedDraws, coord: Coordinate) -> int:
    j, t = coord
    size = len(draws.labels)
    t_count = _time_count(draws)
    if not (0 <= j < size // t_count and 0 <= t < t_count):
        raise UsageError(f"Exposure coordinate {coord} is out of range")
    return j * t_count + t


def _time_count(draws: InducedDraws) -> int:
    times = {label.rsplit("_t", 1)[1] for label in draws.labels}
    return len(times)


def interaction_label(labels: Sequence[str], a: int, b: int) -> str:
    return f"{INTERACTION}:{labels[a]}:{labels[b]}"


def summarize_effects(
    draws: InducedDraws, selector: str | tuple[int, ...] = ALL
) -> list[EffectSummary]:
    """Summarize main effects, interactions or one chosen coefficient.

    Args:
        draws: Induced coefficient draws
        selector: ``main``, ``interaction``, ``all``, or a 0-based tuple
            ``(j, t)`` for one main effect / ``(j1, t1, j2, t2)`` for one
            interaction

    Returns:
        Summaries; interactions are the symmetric Gamma entries of the upper
        triangle (diagonal included)

    Raises:
        UsageError: For empty draws or an invalid selector

    """
    _check_draws(draws)
    labels = draws.labels
    if isinstance(selector, tuple):
        if len(selector) == 2:
            a = _coordinate(draws, selector)
            return [EffectSummary.from_draws(f"{MAIN}:{labels[a]}", draws.alpha[:, a])]
        if len(selector) == 4:
            a = _coordinate(draws, selector[:2])
            b = _coordinate(draws, selector[2:])
            a, b = min(a, b), max(a, b)
            return [EffectSummary.from_draws(interaction_label(labels, a, b), draws.gamma[:, a, b])]
        raise UsageError(f"Selector {selector} must have 2 or 4 indices")
    if selector not in (MAIN, INTERACTION, ALL):
        raise UsageError(f"Unknown selector {selector!r}")

    out = []
    if selector in (MAIN, ALL):
        out += [
            EffectSummary.from_draws(f"{MAIN}:{label}", draws.alpha[:, a])
            for a, label in enumerate(labels)
        ]
    if selector in (INTERACTION, ALL):
        out += [
            EffectSummary.from_draws(interaction_label(labels, a, b), draws.gamma[:, a, b])
            for a, b in zip(*np.triu_indices(len(labels)))
        ]
    return out


def contrast_values(
    draws: InducedDraws, subset: Iterable[Coordinate], lo: float = -1.0, hi: float = 1.0
) -> NDArray[np.float64]:
    """Per-draw E[y | x = d_hi] - E[y | x = d_lo] on the induced surface."""
    idx = sorted({_coordinate(draws, coord) for coord in subset})
    if not idx:
        raise UsageError("Contrast subset must not be empty")
    d = np.zeros(len(draws.labels))
    d[idx] = 1.0
    linear = draws.alpha @ d
    quad = np.einsum("a,sab,b->s", d, draws.gamma, d)
    return (hi - lo) * linear + (hi**2 - lo**2) * quad


def cumulative_effect(
    draws: InducedDraws,
    subset: Iterable[Coordinate],
    lo: float = -1.0,
    hi: float = 1.0,
    label: str | None = None,
) -> EffectSummary:
    """Effect of moving every coordinate in ``subset`` from ``lo`` to ``hi``.

    All other coordinates are held at zero. With ``lo = -hi`` the quadratic
    terms cancel and the effect is ``2 hi`` times the summed main effects.

    Raises:
        UsageError: For an empty subset or an out-of-range coordinate

    """
    coords = list(subset)
    values = contrast_values(draws, coords, lo, hi)
    if label is None:
        label = "cumulative:" + "+".join(draws.labels[_coordinate(draws, c)] for c in coords)
    return EffectSummary.from_draws(label, values)


def exposure_cumulative(draws: InducedDraws, j: int, name: str | None = None) -> EffectSummary:
    """Cumulative effect of one exposure over all its times."""
    t_count = _time_count(draws)
    label = f"cumulative:{name}" if name is not None else None
    return cumulative_effect(draws, [(j, t) for t in range(t_count)], label=label)


def main_contrast(draws: InducedDraws, j: int, t: int, half_width: float = 0.5) -> EffectSummary:
    """Effect of moving (j, t) from -half_width to +half_width; equals alpha_jt at 0.5."""
    label = f"contrast:{draws.labels[_coordinate(draws, (j, t))]}"
    return cumulative_effect(draws, [(j, t)], -half_width, half_width, label=label)


def regression_surface(
    draws: InducedDraws,
    axis1: Iterable[Coordinate],
    axis2: Iterable[Coordinate],
    grid: ArrayLike,
    include_intercept: bool = False,
    level: float = INTERVAL_LEVEL,
) -> pd.DataFrame:
    """Regression surface over a grid of two coordinate groups.

    At grid point (u, v) the exposures in ``axis1`` are set to u, those in
    ``axis2`` to v and everything else (covariates included) to 0.

    Returns:
        Frame with columns u, v, mean, lo, hi, excludes_zero

    Raises:
        UsageError: If the axes overlap or are empty

    """
    first = sorted({_coordinate(draws, c) for c in axis1})
    second = sorted({_coordinate(draws, c) for c in axis2})
    if not first or not second:
        raise UsageError("Surface axes must not be empty")
    if set(first) & set(second):
        raise UsageError("Surface axes must be disjoint")
    m = len(draws.labels)
    e1, e2 = np.zeros(m), np.zeros(m)
    e1[first] = 1.0
    e2[second] = 1.0
    a1, a2 = draws.alpha @ e1, draws.alpha @ e2
    g11 = np.einsum("a,sab,b->s", e1, draws.gamma, e1)
    g22 = np.einsum("a,sab,b->s", e2, draws.gamma, e2)
    g12 = np.einsum("a,sab,b->s", e1, draws.gamma, e2)
    points = np.asarray(grid, dtype=float)
    u, v = np.meshgrid(points, points, indexing="ij")
    u, v = u.ravel(), v.ravel()
    values = (
        np.outer(a1, u) + np.outer(a2, v) + np.outer(g11, u**2) + np.outer(g22, v**2)
        + 2.0 * np.outer(g12, u * v)
    )
    if include_intercept:
        values = values + draws.alpha0[:, None]
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(values, [tail, 1.0 - tail], axis=0)
    return pd.DataFrame(
        {
            "u": u,
            "v": v,
            "mean": values.mean(axis=0),
            "lo": lower,
            "hi": upper,
            "excludes_zero": (lower > 0.0) | (upper < 0.0),
        }
    )


def difference_draws(flagged: InducedDraws, reference: InducedDraws) -> InducedDraws:
    """Draw-wise difference of two groups' coefficients."""
    if flagged.labels != reference.labels or len(flagged) != len(reference):
        raise AlignmentError("Group draws do not line up")
    return InducedDraws(
        flagged.labels,
        flagged.alpha0 - reference.alpha0,
        flagged.alpha - reference.alpha,
        flagged.gamma - reference.gamma,
    )


def covariate_effects(fit: FitResult) -> list[EffectSummary]:
    """Summaries of the covariate coefficients."""
    values = fit.covariate_draws()
    return [
        EffectSummary.from_draws(f"covariate:{name}", values[:, j])
        for j, name in enumerate(fit.data.covariate_names)
    ]


# ---------------------------------------------------------------------------
# Posterior predictive checks
# ---------------------------------------------------------------------------


class PpcMode(enum.StrEnum):
    """Output forms of a predictive check."""

    PER_SUBJECT = "per_subject"
    MARGINAL = "marginal"


@dataclass
class PredictiveCheck:
    """Replicated outcomes of every retained draw."""

    ids: tuple[str, ...]
    observed: NDArray[np.float64]
    replicates: NDArray[np.float64]

    def per_subject(self, level: float = INTERVAL_LEVEL) -> pd.DataFrame:
        """Predictive mean and interval per subject."""
        tail = (1.0 - level) / 2.0
        lower, upper = np.quantile(self.replicates, [tail, 1.0 - tail], axis=0)
        return pd.DataFrame(
            {
                "id": list(self.ids),
                "y": self.observed,
                "mean": self.replicates.mean(axis=0),
                "lo95": lower,
                "hi95": upper,
                "inside": (self.observed >= lower) & (self.observed <= upper),
            }
        )

    def pooled(self) -> NDArray[np.float64]:
        return self.replicates.ravel()

    def pooled_frame(self) -> pd.DataFrame:
        """Every replicated outcome in long form, for marginal density plots."""
        draws, n = self.replicates.shape
        return pd.DataFrame(
            {
                "draw": np.repeat(np.arange(1, draws + 1), n),
                "id": np.tile(np.asarray(self.ids, dtype=object), draws),
                "y_rep": self.pooled(),
            }
        )

    def marginal(self) -> pd.DataFrame:
        """Replicated summary statistics against the observed ones, with predictive p-values."""
        checks = {
            "mean": np.mean,
            "sd": lambda a, axis=None: np.std(a, axis=axis, ddof=1),
            "median": np.median,
            "min": np.min,
            "max": np.max,
        }
        rows = []
        for name, func in checks.items():
            observed = float(func(self.observed))
            replicated = func(self.replicates, axis=1)
            rows.append(
                {
                    "check": name,
                    "observed": observed,
                    "replicated_mean": float(np.mean(replicated)),
                    "replicated_sd": float(np.std(replicated, ddof=1)),
                    "p_value": float(np.mean(replicated > observed)),
                }
            )
        return pd.DataFrame(rows)


def ppc(fit: FitResult, seed: int = 0, original_scale: bool = False) -> PredictiveCheck:
    """Draw one replicated outcome vector per retained draw.

    Args:
        fit: Fitted model (any kind)
        seed: Seed of the replicate noise
        original_scale: Undo the outcome standardization

    Raises:
        UsageError: If a joint-model fit lacks latent-factor draws

    """
    if fit.options.model is ModelKind.LOWFR and not fit.draws.block("eta")[0]:
        raise UsageError("Predictive checks of the joint model need latent-factor draws")
    rng = np.random.default_rng(seed)
    means = fit.conditional_means()
    noise = np.sqrt(fit.noise_variance())[:, None]
    replicates = means + noise * rng.standard_normal(means.shape)
    observed = fit.data.y
    if original_scale and fit.record is not None:
        replicates = fit.record.unstandardize_y(replicates)
        observed = fit.record.unstandardize_y(observed)
    _LOGGER.debug("Drew %d predictive replicates of %d subjects", *replicates.shape)
    return PredictiveCheck(fit.data.ids, np.asarray(observed), replicates)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CrossValResult:
    """Pooled and per-fold out-of-sample mean squared errors."""

    folds: NDArray[np.int64]
    fold_mse: NDArray[np.float64]
    mse: float

    def to_frame(self, model: str) -> pd.DataFrame:
        rows = [{"model": model, "fold": f + 1, "mse": m} for f, m in enumerate(self.fold_mse)]
        rows.append({"model": model, "fold": "pooled", "mse": self.mse})
        return pd.DataFrame(rows)


def fold_assignment(n: int, folds: int = DEFAULT_FOLDS, seed: int = 0) -> NDArray[np.int64]:
    """Seeded fold index of every subject.

    Raises:
        ConfigurationError: If a fold would hold fewer than 2 subjects

    """
    if folds < 2:
        raise ConfigurationError(f"Cross-validation needs at least 2 folds, got {folds}")
    if n // folds < 2:
        raise ConfigurationError(f"{folds} folds over {n} subjects leave a fold with fewer than 2")
    assignment = np.empty(n, dtype=int)
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for fold, (_, test) in enumerate(splitter.split(np.arange(n))):
        assignment[test] = fold
    return assignment


def crossval(
    data: ExposureDataset, options: FitOptions, folds: int = DEFAULT_FOLDS, seed: int = 0
) -> CrossValResult:
    """K-fold out-of-sample MSE of one model configuration.

    Each fold is fitted on its complement; held-out outcomes are predicted by
    the posterior mean of E[y | x, z].
    """
    assignment = fold_assignment(data.n, folds, seed)
    sq_err = np.empty(data.n)
    fold_mse = np.empty(folds)
    for fold in range(folds):
        test = np.flatnonzero(assignment == fold)
        train = np.flatnonzero(assignment != fold)
        result = fit_model(data.subset(train), options, name=f"fold {fold + 1}")
        held_out = data.subset(test)
        sq_err[test] = (held_out.y - result.predict_mean(held_out)) ** 2
        fold_mse[fold] = float(sq_err[test].mean())
        _LOGGER.info("Fold %d/%d: out-of-sample MSE %.4g", fold + 1, folds, fold_mse[fold])
    return CrossValResult(assignment, fold_mse, float(sq_err.mean()))


# ---------------------------------------------------------------------------
# Simulation metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsRow:
    """Estimation metrics of one model against the simulation truth.

    TN rates are NaN when the truth has no zero coefficients.
    """

    model: str
    main_mse: float
    int_mse: float
    main_coverage: float
    int_coverage: float
    main_tp: float
    main_tn: float
    ce_mse: float
    ce_coverage: float
    ce_tp: float
    ce_tn: float

    @classmethod
    def average(cls, model: str, rows: Sequence[MetricsRow]) -> MetricsRow:
        """Field-wise mean, ignoring undefined values."""
        if not rows:
            raise UsageError("No metric rows to average")
        values = {}
        for name in (f.name for f in fields(cls)):
            if name == "model":
                continue
            column = np.array([getattr(row, name) for row in rows], dtype=float)
            values[name] = math.nan if np.isnan(column).all() else float(np.nanmean(column))
        return cls(model=model, **values)


def _rates(
    summaries: Sequence[EffectSummary], truth: NDArray[np.float64]
) -> tuple[float, float, float, float]:
    mean = np.array([s.mean for s in summaries])
    lower = np.array([s.lower for s in summaries])
    upper = np.array([s.upper for s in summaries])
    mse = float(np.mean((mean - truth) ** 2))
    coverage = float(np.mean((lower <= truth) & (truth <= upper)))
    nonzero = truth != 0.0
    correct = ((lower > 0.0) & (truth > 0.0)) | ((upper < 0.0) & (truth < 0.0))
    tp = float(np.mean(correct[nonzero])) if nonzero.any() else math.nan
    includes = (lower <= 0.0) & (upper >= 0.0)
    tn = float(np.mean(includes[~nonzero])) if (~nonzero).any() else math.nan
    return mse, coverage, tp, tn


def evaluate_metrics(draws: InducedDraws, truth: SimTruth, model: str = "lowfr") -> MetricsRow:
    """Compare posterior summaries with the true coefficients.

    Raises:
        AlignmentError: If the exposure labels differ

    """
    if sorted(draws.labels) != sorted(truth.labels):
        raise AlignmentError("Estimated and true coefficients have different labels")
    order = [draws.index(label) for label in truth.labels]
    aligned = InducedDraws(
        list(truth.labels),
        draws.alpha0,
        draws.alpha[:, order],
        draws.gamma[:, order][:, :, order],
    )
    m = len(truth.labels)
    rows, cols = np.triu_indices(m)
    main = summarize_effects(aligned, MAIN)
    inter = summarize_effects(aligned, INTERACTION)
    main_mse, main_cov, main_tp, main_tn = _rates(main, truth.alpha)
    int_mse, int_cov, _, _ = _rates(inter, truth.gamma[rows, cols])
    ce = [exposure_cumulative(aligned, j) for j in range(truth.p)]
    ce_mse, ce_cov, ce_tp, ce_tn = _rates(ce, truth_cumulative(truth))
    return MetricsRow(
        model, main_mse, int_mse, main_cov, int_cov, main_tp, main_tn, ce_mse, ce_cov, ce_tp, ce_tn
    )
