"""Command-line interface: simulate, fit, effects, ppc, crossval and benchmark.

Exit codes: 0 success, 2 usage or validation error, 3 I/O error, 4 inference
failure.
"""

from __future__ import annotations

import argparse
from collections.abc import Callable, Sequence
from dataclasses import asdict, fields
import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .config import parse_groups, parse_surface, resolve_config, write_resolved
from .const import (
    BENCHMARK_FAIL_FRACTION,
    CONF_CHAINS,
    CONF_DATA,
    CONF_FIT,
    CONF_FOLDS,
    CONF_GRID_MAX,
    CONF_GRID_MIN,
    CONF_GRID_STEP,
    CONF_GROUPS,
    CONF_JOBS,
    CONF_K,
    CONF_MAX_TREEDEPTH,
    CONF_MODE,
    CONF_MODEL,
    CONF_MODELS,
    CONF_N,
    CONF_ORIGINAL_SCALE,
    CONF_OUT,
    CONF_RANK,
    CONF_REPS,
    CONF_SAMPLES,
    CONF_SCENARIO,
    CONF_SEED,
    CONF_SEX_COL,
    CONF_SEX_INTERACTIONS,
    CONF_STANDARDIZE,
    CONF_SURFACE,
    CONF_TARGET_ACCEPT,
    CONF_WARMUP,
    EXIT_INFERENCE,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    FILE_CONFIG,
    FILE_CV,
    FILE_DATA,
    FILE_DIAGNOSTICS,
    FILE_EFFECTS,
    FILE_IMPUTED,
    FILE_INDUCED,
    FILE_INDUCED_FLAGGED,
    FILE_METRICS,
    FILE_PPC,
    FILE_PPC_CHECKS,
    FILE_SURFACE,
    FILE_TRUTH,
    FLOAT_FORMAT,
    SCENARIOS,
)
from .data import read_dataset, write_dataset
from .diagnostics import diagnose, diagnostics_table
from .effects import (
    EffectSummary,
    MetricsRow,
    PpcMode,
    covariate_effects,
    crossval,
    cumulative_effect,
    difference_draws,
    evaluate_metrics,
    exposure_cumulative,
    ppc,
    regression_surface,
    summaries_frame,
    summarize_effects,
)
from .errors import (
    AlignmentError,
    ConfigurationError,
    DimensionError,
    DomainError,
    EvaluationError,
    FitFailure,
    InitializationError,
    InputError,
    LayoutError,
    UsageError,
)
from .fit import FitOptions, FitResult, ModelKind, fit_model, read_fit, write_fit
from .induced import Group, InducedDraws
from .model import Variant
from .sampler import SamplerConfig
from .simgen import simulate

_LOGGER = logging.getLogger(__name__)

USAGE_ERRORS = (
    UsageError,
    ConfigurationError,
    InputError,
    LayoutError,
    DimensionError,
    DomainError,
    AlignmentError,
)
INFERENCE_ERRORS = (FitFailure, InitializationError, EvaluationError)


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    _LOGGER.info("Wrote %s", path)


def _out_dir(config: dict[str, Any], fallback: str | None = None) -> Path:
    out = Path(config.get(CONF_OUT) or fallback or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def sampler_config(config: dict[str, Any], seed: int | None = None) -> SamplerConfig:
    """Sampler settings from a resolved configuration."""
    return SamplerConfig(
        chains=config[CONF_CHAINS],
        warmup=config[CONF_WARMUP],
        samples=config[CONF_SAMPLES],
        seed=config[CONF_SEED] if seed is None else seed,
        target_accept=config[CONF_TARGET_ACCEPT],
        max_treedepth=config[CONF_MAX_TREEDEPTH],
    )


def fit_options(config: dict[str, Any]) -> FitOptions:
    """Fit options from a resolved ``fit`` or ``crossval`` configuration."""
    model = ModelKind(config[CONF_MODEL])
    return FitOptions(
        model=model,
        k=config[CONF_K],
        rank=config[CONF_RANK] if model is ModelKind.DIRECT else None,
        sex_col=config.get(CONF_SEX_COL),
        sex_interactions=config[CONF_SEX_INTERACTIONS],
        standardize=config[CONF_STANDARDIZE],
        sampler=sampler_config(config),
        jobs=config.get(CONF_JOBS),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(config: dict[str, Any]) -> int:
    """Write a simulated dataset and its true coefficients."""
    data, truth = simulate(config[CONF_SCENARIO], seed=config[CONF_SEED], n=config[CONF_N])
    out = _out_dir(config)
    write_dataset(data, out / FILE_DATA)
    _write_csv(truth.to_frame(), out / FILE_TRUTH)
    write_resolved("simulate", config, out / FILE_CONFIG)
    return EXIT_OK


def _induced_diagnostics(fit: FitResult, induced: InducedDraws) -> pd.DataFrame:
    shape = (fit.draws.chains, fit.draws.samples)
    rows = [
        diagnose(f"alpha[{label}]", induced.alpha[:, a].reshape(shape))
        for a, label in enumerate(induced.labels)
    ]
    return pd.DataFrame([asdict(row) for row in rows])


def cmd_fit(config: dict[str, Any]) -> int:
    """Fit a model and write the fit directory."""
    raw = read_dataset(config[CONF_DATA])
    result = fit_model(raw, fit_options(config))
    out = _out_dir(config)
    write_fit(result, raw, out)
    induced = result.induced()
    diagnostics = pd.concat(
        [diagnostics_table(result.draws), _induced_diagnostics(result, induced)], ignore_index=True
    )
    _write_csv(diagnostics, out / FILE_DIAGNOSTICS)
    _write_csv(induced.to_frame(), out / FILE_INDUCED)
    if result.options.variant is Variant.LOWFR_SEX_INT:
        _write_csv(result.induced(Group.FLAGGED).to_frame(), out / FILE_INDUCED_FLAGGED)
    if result.options.model is ModelKind.LOWFR and result.data.n_missing:
        _write_csv(result.imputed_frame(), out / FILE_IMPUTED)
    resolved = dict(config)
    resolved[CONF_K] = result.options.k
    write_resolved("fit", resolved, out / FILE_CONFIG)
    for warning in result.draws.warnings:
        _LOGGER.warning("Fit warning: %s", warning)
    return EXIT_OK


def _effect_rows(
    fit: FitResult, draws: InducedDraws, groups: dict[str, list[tuple[int, int]]]
) -> list[EffectSummary]:
    rows = summarize_effects(draws)
    names = fit.data.exposure_names
    rows += [exposure_cumulative(draws, j, name) for j, name in enumerate(names)]
    every = [(j, t) for j in range(fit.data.p) for t in range(fit.data.T)]
    rows.append(cumulative_effect(draws, every, label="cumulative:All"))
    rows += [
        cumulative_effect(draws, coords, label=f"group:{label}") for label, coords in groups.items()
    ]
    return rows


def _prefixed(rows: list[EffectSummary], prefix: str) -> list[EffectSummary]:
    return [
        EffectSummary(f"{prefix}/{r.label}", r.mean, r.lower, r.upper, r.excludes_zero)
        for r in rows
    ]


def cmd_effects(config: dict[str, Any]) -> int:
    """Summarize effects of a fit, optionally with groups and a regression surface."""
    fit = read_fit(config[CONF_FIT])
    names, times = fit.data.exposure_names, fit.data.times
    groups = parse_groups(config[CONF_GROUPS], names, times) if config.get(CONF_GROUPS) else {}
    reference = fit.induced()
    if fit.options.variant is Variant.LOWFR_SEX_INT:
        flagged = fit.induced(Group.FLAGGED)
        rows = _prefixed(_effect_rows(fit, reference, groups), Group.REFERENCE)
        rows += _prefixed(_effect_rows(fit, flagged, groups), Group.FLAGGED)
        rows += _prefixed(
            _effect_rows(fit, difference_draws(flagged, reference), groups), "difference"
        )
    else:
        rows = _effect_rows(fit, reference, groups)
    if fit.data.c:
        rows += covariate_effects(fit)
    out = _out_dir(config, config[CONF_FIT])
    _write_csv(summaries_frame(rows), out / FILE_EFFECTS)

    if config.get(CONF_SURFACE):
        axis1, axis2 = parse_surface(config[CONF_SURFACE], names, times)
        lo, hi, step = config[CONF_GRID_MIN], config[CONF_GRID_MAX], config[CONF_GRID_STEP]
        if hi < lo:
            raise ConfigurationError(f"grid_max {hi} is below grid_min {lo}")
        grid = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
        _write_csv(regression_surface(reference, axis1, axis2, grid), out / FILE_SURFACE)
    write_resolved("effects", config, out / FILE_CONFIG)
    return EXIT_OK


def cmd_ppc(config: dict[str, Any]) -> int:
    """Posterior predictive check of a fit."""
    fit = read_fit(config[CONF_FIT])
    check = ppc(fit, seed=config[CONF_SEED], original_scale=config[CONF_ORIGINAL_SCALE])
    out = _out_dir(config, config[CONF_FIT])
    if config[CONF_MODE] == PpcMode.PER_SUBJECT:
        _write_csv(check.per_subject(), out / FILE_PPC)
    else:
        _write_csv(check.pooled_frame(), out / FILE_PPC)
        _write_csv(check.marginal(), out / FILE_PPC_CHECKS)
    write_resolved("ppc", config, out / FILE_CONFIG)
    return EXIT_OK


def cmd_crossval(config: dict[str, Any]) -> int:
    """K-fold cross-validation of one model configuration."""
    raw = read_dataset(config[CONF_DATA])
    result = crossval(raw, fit_options(config), folds=config[CONF_FOLDS], seed=config[CONF_SEED])
    out = _out_dir(config)
    _write_csv(result.to_frame(config[CONF_MODEL]), out / FILE_CV)
    write_resolved("crossval", config, out / FILE_CONFIG)
    return EXIT_OK


def _stream_seed(*keys: int) -> int:
    """Seed derived from (run seed, replicate, model) so every fit has its own stream."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def cmd_benchmark(config: dict[str, Any]) -> int:
    """Simulate replicates, fit every model and tabulate estimation metrics."""
    seed, reps, models = config[CONF_SEED], config[CONF_REPS], config[CONF_MODELS]
    rows: list[dict[str, Any]] = []
    per_model: dict[str, list[MetricsRow]] = {model: [] for model in models}
    failures = 0
    for rep in range(reps):
        rep_seed = _stream_seed(seed, rep)
        data, truth = simulate(config[CONF_SCENARIO], seed=rep_seed, n=config[CONF_N])
        for index, model in enumerate(models):
            kind = ModelKind(model)
            options = FitOptions(
                model=kind,
                k=config[CONF_K],
                rank=config[CONF_RANK] if kind is ModelKind.DIRECT else None,
                standardize=False,
                sampler=sampler_config(config, seed=_stream_seed(seed, rep, index)),
                jobs=config.get(CONF_JOBS),
            )
            try:
                result = fit_model(data, options, name=f"rep {rep + 1} {model}")
                metrics = evaluate_metrics(result.induced(), truth, model)
            except INFERENCE_ERRORS as err:
                failures += 1
                _LOGGER.warning("Replicate %d, model %s failed: %s", rep + 1, model, err)
                rows.append({"replicate": rep + 1, "model": model, "failed": True})
                continue
            per_model[model].append(metrics)
            rows.append({"replicate": rep + 1, **asdict(metrics), "failed": False})
    for model, metrics_rows in per_model.items():
        if metrics_rows:
            average = MetricsRow.average(model, metrics_rows)
            rows.append({"replicate": "mean", **asdict(average), "failed": False})
    columns = ["replicate", *(f.name for f in fields(MetricsRow)), "failed"]
    out = _out_dir(config)
    _write_csv(pd.DataFrame(rows, columns=columns), out / FILE_METRICS)
    write_resolved("benchmark", config, out / FILE_CONFIG)
    if failures > BENCHMARK_FAIL_FRACTION * reps * len(models):
        _LOGGER.error("%d of %d fits failed", failures, reps * len(models))
        return EXIT_INFERENCE
    return EXIT_OK


COMMAND_HANDLERS: dict[str, Callable[[dict[str, Any]], int]] = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "effects": cmd_effects,
    "ppc": cmd_ppc,
    "crossval": cmd_crossval,
    "benchmark": cmd_benchmark,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--chains", dest=CONF_CHAINS, type=int)
    parser.add_argument("--warmup", dest=CONF_WARMUP, type=int)
    parser.add_argument("--samples", dest=CONF_SAMPLES, type=int)
    parser.add_argument("--target-accept", dest=CONF_TARGET_ACCEPT, type=float)
    parser.add_argument("--max-treedepth", dest=CONF_MAX_TREEDEPTH, type=int)
    parser.add_argument("--jobs", dest=CONF_JOBS, type=int)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", dest=CONF_MODEL, choices=("lowfr", "cqr", "direct"))
    parser.add_argument("--rank", dest=CONF_RANK, help="direct-model rank or 'full'")
    parser.add_argument("--k", dest=CONF_K, help="number of factors or 'auto'")
    parser.add_argument("--sex-col", dest=CONF_SEX_COL)
    parser.add_argument(
        "--sex-interactions", dest=CONF_SEX_INTERACTIONS, action="store_const", const=True
    )
    parser.add_argument(
        "--standardize", dest=CONF_STANDARDIZE, action=argparse.BooleanOptionalAction
    )


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of every command; unset flags stay None."""
    parser = argparse.ArgumentParser(prog="lowfr", description="Longitudinal factor regression")
    parser.add_argument("--config", help="config file with one [section] per command")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true")
    verbosity.add_argument("--quiet", "-q", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", help="generate a simulated dataset")
    sim.add_argument("--scenario", dest=CONF_SCENARIO, choices=SCENARIOS)
    sim.add_argument("--seed", dest=CONF_SEED, type=int)
    sim.add_argument("--n", dest=CONF_N, type=int)
    sim.add_argument("--out", dest=CONF_OUT)

    fit = commands.add_parser("fit", help="fit a model to a dataset")
    fit.add_argument("--data", dest=CONF_DATA)
    fit.add_argument("--seed", dest=CONF_SEED, type=int)
    fit.add_argument("--out", dest=CONF_OUT)
    _add_model_flags(fit)
    _add_sampler_flags(fit)

    eff = commands.add_parser("effects", help="summarize the effects of a fit")
    eff.add_argument("--fit", dest=CONF_FIT)
    eff.add_argument("--groups", dest=CONF_GROUPS)
    eff.add_argument("--surface", dest=CONF_SURFACE, help="'AXIS1 / AXIS2', e.g. 'e1:1,2 / e1:3'")
    eff.add_argument("--grid-min", dest=CONF_GRID_MIN, type=float)
    eff.add_argument("--grid-max", dest=CONF_GRID_MAX, type=float)
    eff.add_argument("--grid-step", dest=CONF_GRID_STEP, type=float)
    eff.add_argument("--out", dest=CONF_OUT)

    chk = commands.add_parser("ppc", help="posterior predictive check of a fit")
    chk.add_argument("--fit", dest=CONF_FIT)
    chk.add_argument("--mode", dest=CONF_MODE, choices=[str(mode) for mode in PpcMode])
    chk.add_argument("--seed", dest=CONF_SEED, type=int)
    chk.add_argument(
        "--original-scale", dest=CONF_ORIGINAL_SCALE, action="store_const", const=True
    )
    chk.add_argument("--out", dest=CONF_OUT)

    cv = commands.add_parser("crossval", help="k-fold cross-validation")
    cv.add_argument("--data", dest=CONF_DATA)
    cv.add_argument("--folds", dest=CONF_FOLDS, type=int)
    cv.add_argument("--seed", dest=CONF_SEED, type=int)
    cv.add_argument("--out", dest=CONF_OUT)
    _add_model_flags(cv)
    _add_sampler_flags(cv)

    bench = commands.add_parser("benchmark", help="simulation benchmark of several models")
    bench.add_argument("--scenario", dest=CONF_SCENARIO, choices=SCENARIOS)
    bench.add_argument("--reps", dest=CONF_REPS, type=int)
    bench.add_argument("--models", dest=CONF_MODELS, help="comma-separated, e.g. lowfr,cqr")
    bench.add_argument("--seed", dest=CONF_SEED, type=int)
    bench.add_argument("--n", dest=CONF_N, type=int)
    bench.add_argument("--k", dest=CONF_K)
    bench.add_argument("--rank", dest=CONF_RANK)
    bench.add_argument("--out", dest=CONF_OUT)
    _add_sampler_flags(bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code == 0 else EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    overrides = {
        key: value
        for key, value in vars(args).items()
        if key not in ("command", "config", "verbose", "quiet")
    }
    try:
        config = resolve_config(args.command, args.config, overrides)
        return COMMAND_HANDLERS[args.command](config)
    except USAGE_ERRORS as err:
        _LOGGER.error("%s", err)
        return EXIT_USAGE
    except INFERENCE_ERRORS as err:
        _LOGGER.error("Inference failed: %s", err)
        return EXIT_INFERENCE
    except OSError as err:
        _LOGGER.error("I/O error: %s", err)
        return EXIT_IO
