"""Fit orchestration shared by the command line, cross-validation and benchmarks."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import asdict, dataclass, field, replace
import enum
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
import pandas as pd

from .const import (
    FILE_DATA,
    FILE_DRAWS,
    FILE_MODEL,
    FILE_STANDARDIZATION,
    FLOAT_FORMAT,
    INTERVAL_LEVEL,
)
from .coordinator import run_chains
from .cqr import CqrDesign, CqrParams, CqrPosterior, build_cqr_layout, build_design, cqr_effects
from .data import (
    ExposureDataset,
    StandardizationRecord,
    mean_impute,
    read_dataset,
    select_k,
    standardize,
    write_dataset,
)
from .errors import InputError, UsageError
from .induced import Group, InducedCoefficients, InducedDraws, induced_draws
from .layout import ParameterLayout, ParamView
from .model import (
    DirectPosterior,
    HyperParams,
    LowFRPosterior,
    ModelSpec,
    Variant,
    build_layout,
    direct_theta,
    main_theta,
)
from .sampler import Posterior, PosteriorDraws, SamplerConfig

_LOGGER = logging.getLogger(__name__)


class ModelKind(enum.StrEnum):
    """Models that can be fitted."""

    LOWFR = "lowfr"
    CQR = "cqr"
    DIRECT = "direct"


@dataclass(frozen=True)
class FitOptions:
    """How to fit one dataset.

    ``k = None`` selects the number of factors from the data; ``rank = None``
    is the unstructured (FULL) direct regression.
    """

    model: ModelKind = ModelKind.LOWFR
    k: int | None = None
    rank: int | None = None
    sex_col: str | None = None
    sex_interactions: bool = False
    standardize: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    jobs: int | None = None
    hyper: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self) -> None:
        """Validate option combinations."""
        object.__setattr__(self, "model", ModelKind(self.model))
        if self.sex_interactions and self.model is not ModelKind.LOWFR:
            raise UsageError("Sex interactions are only available for the lowfr model")
        if self.sex_interactions and self.sex_col is None:
            raise UsageError("Sex interactions need a sex column")

    @property
    def variant(self) -> Variant:
        if self.model is ModelKind.DIRECT:
            return Variant.DIRECT
        if self.sex_interactions:
            return Variant.LOWFR_SEX_INT
        return Variant.LOWFR


@dataclass
class PreparedFit:
    """Model-scale data and the posterior ready to be sampled."""

    options: FitOptions
    data: ExposureDataset
    posterior: Posterior
    spec: ModelSpec | None = None
    design: CqrDesign | None = None
    record: StandardizationRecord | None = None


def prepare_fit(raw: ExposureDataset, options: FitOptions) -> PreparedFit:
    """Standardize, impute or select k as the model requires and build the posterior.

    Raises:
        InputError: If the data is invalid
        UsageError: If the options do not fit the data

    """
    raw.validate()
    keep = (options.sex_col,) if options.sex_col else ()
    record = None
    data = raw
    if options.standardize:
        data, record = standardize(raw, keep_covariates=keep)

    if options.model is ModelKind.CQR:
        data = mean_impute(data)
        design = build_design(data.x)
        posterior = CqrPosterior(design, data.y, data.z)
        return PreparedFit(options, data, posterior, design=design, record=record)

    if options.model is ModelKind.DIRECT:
        data = mean_impute(data)
        spec = ModelSpec.for_data(data, Variant.DIRECT, rank=options.rank, hyper=options.hyper)
        return PreparedFit(options, data, DirectPosterior(spec, data), spec=spec, record=record)

    k = options.k if options.k is not None else select_k(data.x, data.mask)
    if options.k is None:
        _LOGGER.info("Selected k = %d latent factors", k)
        options = replace(options, k=k)
    spec = ModelSpec.for_data(
        data, options.variant, k=k, sex_col=options.sex_col, hyper=options.hyper
    )
    return PreparedFit(options, data, LowFRPosterior(spec, data), spec=spec, record=record)


@dataclass
class FitResult:
    """Draws of a fitted model together with everything needed to interpret them."""

    options: FitOptions
    data: ExposureDataset
    draws: PosteriorDraws
    spec: ModelSpec | None = None
    design: CqrDesign | None = None
    record: StandardizationRecord | None = None

    @property
    def labels(self) -> list[str]:
        return self.data.exposure_labels()

    @property
    def layout(self) -> ParameterLayout:
        if self.design is not None:
            return build_cqr_layout(self.design, self.data.c)
        assert self.spec is not None
        return build_layout(self.spec)

    @property
    def n_draws(self) -> int:
        return self.draws.chains * self.draws.samples

    def views(self) -> Iterator[ParamView]:
        """Constrained parameter views of every retained draw."""
        layout = self.layout
        for flat in self.draws.flat():
            yield layout.unflatten(flat)

    def induced(self, group: Group | str | None = None) -> InducedDraws:
        """Per-draw (alpha0, alpha, Gamma) in the common exposure coordinates.

        Raises:
            UsageError: If a group is requested from a model without groups

        """
        if self.options.model is ModelKind.LOWFR:
            assert self.spec is not None
            return induced_draws(self.draws, self.spec, self.labels, group)
        if group is not None:
            raise UsageError("Group coefficients need the sex-interaction variant")
        m = len(self.labels)
        coefs = []
        for view in self.views():
            if self.design is not None:
                effects = cqr_effects(self.design, CqrParams.from_view(view))
                coefs.append(InducedCoefficients(*effects))
            else:
                theta = direct_theta(view).ravel()
                coefs.append(InducedCoefficients(float(view["mu"]), theta, np.zeros((m, m))))
        return InducedDraws.stack(self.labels, coefs)

    def covariate_draws(self) -> NDArray[np.float64]:
        """(draws, c) covariate coefficients."""
        _, values = self.draws.block("cov")
        return values.reshape(-1, self.data.c)

    def noise_variance(self) -> NDArray[np.float64]:
        """Outcome noise variance of every draw."""
        name = "sigma2" if self.design is not None else "sigma2_y"
        return self.draws.param(name).ravel()

    def conditional_means(self) -> NDArray[np.float64]:
        """(draws, n) outcome means of the fitted subjects.

        The joint model uses each draw's latent factors; the regressions use
        the (imputed) exposures.
        """
        data = self.data
        cov = self.covariate_draws()
        means = np.empty((self.n_draws, data.n))
        for s, view in enumerate(self.views()):
            base = float(view["mu"]) + data.z @ cov[s]
            if self.design is not None:
                coefs = np.concatenate([np.ravel(view["theta"]), view["gamma"]])
                means[s] = base + self.design.matrix @ coefs
            elif self.options.model is ModelKind.DIRECT:
                means[s] = base + np.einsum("jt,ijt->i", direct_theta(view), data.x)
            else:
                means[s] = base + _factor_mean(view, self.spec, data)
        return means

    def predict_mean(self, raw: ExposureDataset) -> NDArray[np.float64]:
        """Posterior mean of E[y | x, z] for new subjects, on the outcome's original scale.

        Masked exposures of the new subjects are filled with the training means.
        """
        data = self.record.apply(raw) if self.record is not None else raw
        fill = np.nanmean(np.where(self.data.mask, np.nan, self.data.x), axis=0)
        x = np.where(data.mask, fill[None, :, :], data.x).reshape(data.n, -1)
        cov = self.covariate_draws().mean(axis=0)

        def surface(draws: InducedDraws) -> NDArray[np.float64]:
            alpha = draws.alpha.mean(axis=0)
            gamma = draws.gamma.mean(axis=0)
            return float(draws.alpha0.mean()) + x @ alpha + np.einsum("ia,ab,ib->i", x, gamma, x)

        pred = surface(self.induced())
        if self.options.variant is Variant.LOWFR_SEX_INT:
            assert self.spec is not None and self.spec.sex_index is not None
            flagged = surface(self.induced(Group.FLAGGED))
            pred = np.where(data.z[:, self.spec.sex_index] == 1.0, flagged, pred)
        pred = pred + data.z @ cov
        return self.record.unstandardize_y(pred) if self.record is not None else pred

    def imputed_frame(self) -> pd.DataFrame:
        """Posterior summaries of every imputed exposure value."""
        if self.options.model is not ModelKind.LOWFR or self.data.n_missing == 0:
            raise UsageError("Only joint-model fits with missing exposures impute values")
        _, values = self.draws.block("x_missing")
        flat = values.reshape(-1, values.shape[2])
        tail = (1.0 - INTERVAL_LEVEL) / 2.0
        lower, upper = np.quantile(flat, [tail, 1.0 - tail], axis=0)
        rows = []
        for pos, (i, j, t) in enumerate(self.data.missing_index()):
            row = {
                "id": self.data.ids[i],
                "exposure": self.data.exposure_names[j],
                "time": self.data.times[t],
                "mean": flat[:, pos].mean(),
                "lo95": lower[pos],
                "hi95": upper[pos],
            }
            if self.record is not None:
                for key in ("mean", "lo95", "hi95"):
                    row[f"{key}_original"] = float(self.record.unstandardize_x(row[key], j, t))
            rows.append(row)
        return pd.DataFrame(rows)


def _factor_mean(
    view: ParamView, spec: ModelSpec | None, data: ExposureDataset
) -> NDArray[np.float64]:
    assert spec is not None
    eta = view["eta"]
    mean = np.einsum("ht,iht->i", main_theta(view), eta) + np.einsum(
        "iht,hg,ts,igs->i", eta, view["B"], view["W"], eta, optimize=True
    )
    if spec.variant is Variant.LOWFR_SEX_INT:
        assert spec.sex_index is not None
        theta_sex = np.outer(view["beta_int"], view["omega_int"])
        mean = mean + data.z[:, spec.sex_index] * np.einsum("ht,iht->i", theta_sex, eta)
    return mean


def fit_model(raw: ExposureDataset, options: FitOptions, name: str = "fit") -> FitResult:
    """Prepare the data, sample the posterior and collect the result.

    Raises:
        InputError: If the data is invalid
        FitFailure: If sampling fails

    """
    prepared = prepare_fit(raw, options)
    _LOGGER.info(
        "%s: fitting %s (%d parameters) to %d subjects",
        name,
        prepared.options.variant if prepared.design is None else ModelKind.CQR,
        prepared.posterior.dim,
        prepared.data.n,
    )
    draws = run_chains(prepared.posterior, prepared.options.sampler, prepared.options.jobs)
    return FitResult(
        prepared.options,
        prepared.data,
        draws,
        spec=prepared.spec,
        design=prepared.design,
        record=prepared.record,
    )


# ---------------------------------------------------------------------------
# Fit directory: data.csv (input copy), draws.csv, model.json, standardization.csv
# ---------------------------------------------------------------------------


def options_record(options: FitOptions) -> dict[str, Any]:
    """JSON-ready description of fit options."""
    return {
        "model": str(options.model),
        "k": options.k,
        "rank": options.rank,
        "sex_col": options.sex_col,
        "sex_interactions": options.sex_interactions,
        "standardize": options.standardize,
        "sampler": asdict(options.sampler),
        "hyper": asdict(options.hyper),
    }


def options_from_record(record: dict[str, Any]) -> FitOptions:
    """Inverse of :func:`options_record`."""
    try:
        return FitOptions(
            model=ModelKind(record["model"]),
            k=record["k"],
            rank=record["rank"],
            sex_col=record["sex_col"],
            sex_interactions=record["sex_interactions"],
            standardize=record["standardize"],
            sampler=SamplerConfig(**record["sampler"]),
            hyper=HyperParams(**record["hyper"]),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise InputError(f"Invalid model description: {err}") from err


def write_fit(result: FitResult, raw: ExposureDataset, directory: str | Path) -> None:
    """Persist a fit so that it can be reopened with :func:`read_fit`."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(raw, out / FILE_DATA)
    result.draws.to_frame().to_csv(
        out / FILE_DRAWS, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )
    description = options_record(result.options)
    if result.spec is not None:
        description["variant"] = str(result.spec.variant)
    (out / FILE_MODEL).write_text(json.dumps(description, indent=2, sort_keys=True) + "\n")
    if result.record is not None:
        result.record.to_frame(raw).to_csv(
            out / FILE_STANDARDIZATION, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )
    _LOGGER.info("Wrote fit to %s", out)


def read_fit(directory: str | Path) -> FitResult:
    """Reopen a fit directory written by :func:`write_fit`.

    Raises:
        InputError: If a file is malformed
        OSError: If a file is missing

    """
    src = Path(directory)
    try:
        description = json.loads((src / FILE_MODEL).read_text())
    except json.JSONDecodeError as err:
        raise InputError(f"Cannot parse {src / FILE_MODEL}: {err}") from err
    options = options_from_record(description)
    raw = read_dataset(src / FILE_DATA)
    prepared = prepare_fit(raw, options)
    try:
        frame = pd.read_csv(src / FILE_DRAWS)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as err:
        raise InputError(f"Cannot parse {src / FILE_DRAWS}: {err}") from err
    draws = PosteriorDraws.from_frame(frame)
    if draws.names != prepared.posterior.parameter_names():
        raise InputError(f"Draws in {src} do not match the described model")
    return FitResult(
        prepared.options,
        prepared.data,
        draws,
        spec=prepared.spec,
        design=prepared.design,
        record=prepared.record,
    )
