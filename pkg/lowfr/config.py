"""Run configuration: schemas, config files, groups files and surface specs.

A config file holds one ``[section]`` per command with flat ``key = value``
lines. Flags given on the command line override file values; the merged
settings are validated against the command's schema, which rejects unknown
keys.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
import configparser
import logging
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    COMMANDS,
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
    DEFAULT_CHAINS,
    DEFAULT_FOLDS,
    DEFAULT_GRID_MAX,
    DEFAULT_GRID_MIN,
    DEFAULT_GRID_STEP,
    DEFAULT_MAX_TREEDEPTH,
    DEFAULT_REPS,
    DEFAULT_SAMPLES,
    DEFAULT_TARGET_ACCEPT,
    DEFAULT_WARMUP,
    K_AUTO,
    RANK_FULL,
    SCENARIOS,
    SIM_N,
)
from .errors import ConfigurationError

_LOGGER = logging.getLogger(__name__)

MODEL_NAMES = ("lowfr", "cqr", "direct")
PPC_MODES = ("per_subject", "marginal")

Coordinate = tuple[int, int]


def _auto_or_positive(value: Any) -> int | None:
    """``auto`` (None) or a positive integer."""
    if value is None or str(value).strip().lower() == K_AUTO:
        return None
    return vol.All(vol.Coerce(int), vol.Range(min=1))(value)


def _full_or_positive(value: Any) -> int | None:
    """``full`` (None) or a positive integer."""
    if value is None or str(value).strip().lower() == RANK_FULL:
        return None
    return vol.All(vol.Coerce(int), vol.Range(min=1))(value)


def _comma_list(value: Any) -> list[str]:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (list, tuple)):
        return [str(item) for item in value]
    raise vol.Invalid("expected a comma-separated list")


_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))
_SEED = vol.All(vol.Coerce(int), vol.Range(min=0))

SAMPLER_SCHEMA = {
    vol.Optional(CONF_CHAINS, default=DEFAULT_CHAINS): _POSITIVE_INT,
    vol.Optional(CONF_WARMUP, default=DEFAULT_WARMUP): _POSITIVE_INT,
    vol.Optional(CONF_SAMPLES, default=DEFAULT_SAMPLES): _POSITIVE_INT,
    vol.Optional(CONF_TARGET_ACCEPT, default=DEFAULT_TARGET_ACCEPT): vol.All(
        vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False, max_included=False)
    ),
    vol.Optional(CONF_MAX_TREEDEPTH, default=DEFAULT_MAX_TREEDEPTH): _POSITIVE_INT,
    vol.Optional(CONF_JOBS): vol.Any(None, _POSITIVE_INT),
}

MODEL_SCHEMA = {
    vol.Optional(CONF_MODEL, default="lowfr"): vol.In(MODEL_NAMES),
    vol.Optional(CONF_K, default=K_AUTO): _auto_or_positive,
    vol.Optional(CONF_RANK, default=RANK_FULL): _full_or_positive,
    vol.Optional(CONF_SEX_COL): vol.Any(None, str),
    vol.Optional(CONF_SEX_INTERACTIONS, default=False): vol.Boolean(),
    vol.Optional(CONF_STANDARDIZE, default=True): vol.Boolean(),
}

SCHEMAS: dict[str, vol.Schema] = {
    "simulate": vol.Schema(
        {
            vol.Required(CONF_SCENARIO): vol.In(SCENARIOS),
            vol.Optional(CONF_SEED, default=0): _SEED,
            vol.Optional(CONF_N, default=SIM_N): vol.All(vol.Coerce(int), vol.Range(min=2)),
            vol.Required(CONF_OUT): str,
        },
        extra=vol.PREVENT_EXTRA,
    ),
    "fit": vol.Schema(
        {
            vol.Required(CONF_DATA): str,
            vol.Optional(CONF_SEED, default=0): _SEED,
            vol.Required(CONF_OUT): str,
            **MODEL_SCHEMA,
            **SAMPLER_SCHEMA,
        },
        extra=vol.PREVENT_EXTRA,
    ),
    "effects": vol.Schema(
        {
            vol.Required(CONF_FIT): str,
            vol.Optional(CONF_GROUPS): vol.Any(None, str),
            vol.Optional(CONF_SURFACE): vol.Any(None, str),
            vol.Optional(CONF_GRID_MIN, default=DEFAULT_GRID_MIN): vol.Coerce(float),
            vol.Optional(CONF_GRID_MAX, default=DEFAULT_GRID_MAX): vol.Coerce(float),
            vol.Optional(CONF_GRID_STEP, default=DEFAULT_GRID_STEP): vol.All(
                vol.Coerce(float), vol.Range(min=0.0, min_included=False)
            ),
            vol.Optional(CONF_OUT): vol.Any(None, str),
        },
        extra=vol.PREVENT_EXTRA,
    ),
    "ppc": vol.Schema(
        {
            vol.Required(CONF_FIT): str,
            vol.Optional(CONF_MODE, default="per_subject"): vol.In(PPC_MODES),
            vol.Optional(CONF_SEED, default=0): _SEED,
            vol.Optional(CONF_ORIGINAL_SCALE, default=False): vol.Boolean(),
            vol.Optional(CONF_OUT): vol.Any(None, str),
        },
        extra=vol.PREVENT_EXTRA,
    ),
    "crossval": vol.Schema(
        {
            vol.Required(CONF_DATA): str,
            vol.Optional(CONF_FOLDS, default=DEFAULT_FOLDS): vol.Coerce(int),
            vol.Optional(CONF_SEED, default=0): _SEED,
            vol.Required(CONF_OUT): str,
            **MODEL_SCHEMA,
            **SAMPLER_SCHEMA,
        },
        extra=vol.PREVENT_EXTRA,
    ),
    "benchmark": vol.Schema(
        {
            vol.Required(CONF_SCENARIO): vol.In(SCENARIOS),
            vol.Optional(CONF_REPS, default=DEFAULT_REPS): _POSITIVE_INT,
            vol.Optional(CONF_MODELS, default="lowfr"): vol.All(
                _comma_list, vol.Length(min=1), [vol.In(MODEL_NAMES)]
            ),
            vol.Optional(CONF_SEED, default=0): _SEED,
            vol.Optional(CONF_N, default=SIM_N): vol.All(vol.Coerce(int), vol.Range(min=2)),
            vol.Optional(CONF_K, default=K_AUTO): _auto_or_positive,
            vol.Optional(CONF_RANK, default=RANK_FULL): _full_or_positive,
            vol.Required(CONF_OUT): str,
            **SAMPLER_SCHEMA,
        },
        extra=vol.PREVENT_EXTRA,
    ),
}


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    """Read every section of a config file.

    Raises:
        ConfigurationError: For syntax errors or unknown sections
        OSError: If the file cannot be read

    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except configparser.MissingSectionHeaderError as err:
        raise ConfigurationError("key outside of a [section]", line=err.lineno) from err
    except configparser.ParsingError as err:
        line = err.errors[0][0] if err.errors else None
        raise ConfigurationError(f"cannot parse {path}", line=line) from err
    except configparser.Error as err:
        raise ConfigurationError(f"cannot parse {path}: {err}") from err
    unknown = set(parser.sections()) - set(COMMANDS)
    if unknown:
        raise ConfigurationError(f"Unknown config sections: {sorted(unknown)}")
    return {section: dict(parser[section]) for section in parser.sections()}


def resolve_config(
    command: str, path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> dict[str, Any]:
    """Merge file values and flag overrides and validate them.

    Args:
        command: Command whose section and schema apply
        path: Optional config file
        overrides: Flag values; ``None`` entries are ignored

    Raises:
        ConfigurationError: If the merged settings do not validate

    """
    if command not in SCHEMAS:
        raise ConfigurationError(f"Unknown command {command!r}")
    merged: dict[str, Any] = {}
    if path is not None:
        merged.update(read_config_file(path).get(command, {}))
    merged.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        config = SCHEMAS[command](merged)
    except vol.Invalid as err:
        raise ConfigurationError(f"[{command}] {err}") from err
    _LOGGER.debug("Resolved %s configuration: %s", command, config)
    return config


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    return str(value)


def write_resolved(command: str, config: Mapping[str, Any], path: str | Path) -> None:
    """Write the resolved settings in config-file format.

    ``None`` values are left out; they resolve to the same defaults on re-read.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser[command] = {
        key: _format(value) for key, value in sorted(config.items()) if value is not None
    }
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        parser.write(handle)


# ---------------------------------------------------------------------------
# Groups files and surface axes
# ---------------------------------------------------------------------------


def parse_selection(
    text: str, exposure_names: Sequence[str], times: Sequence[int], line: int | None = None
) -> list[Coordinate]:
    """Parse ``NAME`` or ``NAME:t1,t2`` tokens (space separated) into coordinates.

    Times are the labels used in the data; a bare name selects every time.

    Raises:
        ConfigurationError: For unknown exposures or times

    """
    coords: list[Coordinate] = []
    for token in text.split():
        name, _, time_part = token.partition(":")
        if name not in exposure_names:
            raise ConfigurationError(f"unknown exposure {name!r}", line=line)
        j = list(exposure_names).index(name)
        if not time_part:
            coords += [(j, t) for t in range(len(times))]
            continue
        for item in time_part.split(","):
            try:
                time = int(item)
            except ValueError as err:
                raise ConfigurationError(f"bad time {item!r} in {token!r}", line=line) from err
            if time not in times:
                raise ConfigurationError(f"unknown time {time} in {token!r}", line=line)
            coords.append((j, list(times).index(time)))
    if not coords:
        raise ConfigurationError("empty exposure selection", line=line)
    return list(dict.fromkeys(coords))


def parse_groups(
    path: str | Path, exposure_names: Sequence[str], times: Sequence[int]
) -> dict[str, list[Coordinate]]:
    """Read a groups file.

    Each non-blank line reads ``LABEL = NAME[:t1,t2] NAME ...``; ``#`` starts
    a comment.

    Raises:
        ConfigurationError: For a malformed line (naming it) or an empty file

    """
    groups: dict[str, list[Coordinate]] = {}
    with open(path, encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            label, sep, selection = text.partition("=")
            label = label.strip()
            if not sep or not label:
                raise ConfigurationError("expected 'LABEL = EXPOSURE ...'", line=number)
            if label in groups:
                raise ConfigurationError(f"duplicate group {label!r}", line=number)
            groups[label] = parse_selection(selection, exposure_names, times, line=number)
    if not groups:
        raise ConfigurationError(f"{path} defines no groups")
    return groups


def parse_surface(
    spec: str, exposure_names: Sequence[str], times: Sequence[int]
) -> tuple[list[Coordinate], list[Coordinate]]:
    """Parse ``AXIS1 / AXIS2``, each axis a selection as in a groups file.

    Raises:
        ConfigurationError: If the spec does not have two axes

    """
    parts = spec.split("/")
    if len(parts) != 2:
        raise ConfigurationError(f"Surface {spec!r} must look like 'AXIS1 / AXIS2'")
    return (
        parse_selection(parts[0], exposure_names, times),
        parse_selection(parts[1], exposure_names, times),
    )
