"""Convergence diagnostics: rank-normalized split R-hat and effective sample size."""

from __future__ import annotations

from dataclasses import asdict, dataclass
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd
from scipy import fft, stats

from .errors import UsageError
from .sampler import PosteriorDraws

_LOGGER = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_CONSTANT = "constant"
DIVERGENCE_ROW = "divergent_transitions"

BULK = "bulk"
TAIL = "tail"


def _as_chains(draws: ArrayLike, min_chains: int = 1) -> NDArray[np.float64]:
    ary = np.asarray(draws, dtype=float)
    if ary.ndim == 1:
        ary = ary[None, :]
    if ary.ndim != 2:
        raise UsageError(f"Expected (chains, draws), got shape {ary.shape}")
    if ary.shape[0] < min_chains or ary.shape[1] < 4:
        raise UsageError(
            f"Need at least {min_chains} chain(s) of 4 draws, got shape {ary.shape}"
        )
    return ary


def is_constant(draws: ArrayLike) -> bool:
    """True when every draw is the same value up to float resolution."""
    ary = np.asarray(draws, dtype=float)
    return bool(np.max(ary) - np.min(ary) < np.finfo(float).resolution)


def split_chains(ary: NDArray[np.float64]) -> NDArray[np.float64]:
    """Split every chain in half and stack the halves."""
    half = ary.shape[1] // 2
    return np.vstack((ary[:, :half], ary[:, -half:]))


def z_scale(ary: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rank-normalize with Blom's offset."""
    rank = stats.rankdata(ary, method="average").reshape(ary.shape)
    return stats.norm.ppf((rank - 3.0 / 8.0) / (ary.size - 2.0 * 3.0 / 8.0 + 1.0))


def _rhat(ary: NDArray[np.float64]) -> float:
    _, n = ary.shape
    between = n * np.var(ary.mean(axis=1), ddof=1)
    within = np.mean(np.var(ary, axis=1, ddof=1))
    return float(np.sqrt((between / within + n - 1) / n))


def split_rhat(draws: ArrayLike) -> float:
    """Rank-normalized split R-hat, the larger of the bulk and folded versions.

    Args:
        draws: (chains, draws) array with at least two chains of four draws

    Returns:
        R-hat, or NaN for a constant parameter

    Raises:
        UsageError: If there are too few chains or draws

    """
    ary = _as_chains(draws, min_chains=2)
    if is_constant(ary):
        return math.nan
    split = split_chains(ary)
    bulk = _rhat(z_scale(split))
    folded = _rhat(z_scale(np.abs(split - np.median(split))))
    return max(bulk, folded)


def autocovariance(ary: NDArray[np.float64]) -> NDArray[np.float64]:
    """Autocovariance of every row, through a zero-padded FFT."""
    n = ary.shape[1]
    centered = ary - ary.mean(axis=1, keepdims=True)
    size = fft.next_fast_len(2 * n)
    spectrum = fft.rfft(centered, n=size, axis=1)
    acov = fft.irfft(spectrum * np.conjugate(spectrum), n=size, axis=1)[:, :n]
    return acov / n


def _geyer_ess(ary: NDArray[np.float64]) -> float:
    """ESS from Geyer's initial monotone sequence of summed autocorrelations."""
    n_chain, n_draw = ary.shape
    acov = autocovariance(ary)
    mean_var = np.mean(acov[:, 0]) * n_draw / (n_draw - 1.0)
    var_plus = mean_var * (n_draw - 1.0) / n_draw
    if n_chain > 1:
        var_plus += np.var(ary.mean(axis=1), ddof=1)

    rho = np.zeros(n_draw)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd

    t = 1
    while t < n_draw - 3 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even

    # enforce a monotone sequence of pair sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2.0
            rho[t + 2] = rho[t + 1]
        t += 2

    total = n_chain * n_draw
    tau = -1.0 + 2.0 * np.sum(rho[: max_t + 1]) + np.sum(rho[max_t + 1 : max_t + 2])
    tau = max(tau, 1.0 / np.log10(total))
    return math.nan if np.isnan(rho).any() else float(total / tau)


def ess(draws: ArrayLike, mode: str = BULK) -> float:
    """Effective sample size.

    Args:
        draws: (chains, draws) array, or a single chain
        mode: ``bulk`` (rank-normalized split chains) or ``tail`` (the smaller
            of the 5% and 95% quantile-indicator ESS)

    Returns:
        ESS, or NaN for a constant parameter

    """
    ary = _as_chains(draws)
    if is_constant(ary):
        return math.nan
    if mode == BULK:
        return _geyer_ess(z_scale(split_chains(ary)))
    if mode == TAIL:
        values = []
        for prob in (0.05, 0.95):
            indicator = (ary <= np.quantile(ary, prob)).astype(float)
            split = split_chains(indicator)
            values.append(
                float(split.size) if is_constant(split) else _geyer_ess(split)
            )
        return min(values)
    raise UsageError(f"Unknown ESS mode {mode!r}")


@dataclass(frozen=True)
class ParameterDiagnostics:
    """Summary and convergence diagnostics of one parameter."""

    parameter: str
    mean: float
    sd: float
    rhat: float
    ess_bulk: float
    ess_tail: float
    status: str


def diagnose(name: str, draws: ArrayLike) -> ParameterDiagnostics:
    """Diagnostics of one (chains, draws) array."""
    ary = _as_chains(draws)
    if is_constant(ary):
        _LOGGER.debug("Parameter %s is constant; diagnostics undefined", name)
        return ParameterDiagnostics(
            name, float(ary.mean()), 0.0, math.nan, math.nan, math.nan, STATUS_CONSTANT
        )
    rhat = split_rhat(ary) if ary.shape[0] > 1 else math.nan
    return ParameterDiagnostics(
        name,
        float(ary.mean()),
        float(ary.std(ddof=1)),
        rhat,
        ess(ary, BULK),
        ess(ary, TAIL),
        STATUS_OK,
    )


def diagnostics_table(draws: PosteriorDraws, names: list[str] | None = None) -> pd.DataFrame:
    """Per-parameter diagnostics plus a trailing divergence-count row."""
    names = draws.names if names is None else names
    rows = [asdict(diagnose(name, draws.param(name))) for name in names]
    constant = sum(row["status"] == STATUS_CONSTANT for row in rows)
    if constant:
        _LOGGER.warning("%d parameter(s) are constant across draws", constant)
    rows.append(
        {
            "parameter": DIVERGENCE_ROW,
            "mean": float(draws.divergences()),
            "sd": math.nan,
            "rhat": math.nan,
            "ess_bulk": math.nan,
            "ess_tail": math.nan,
            "status": STATUS_OK,
        }
    )
    return pd.DataFrame(rows)
