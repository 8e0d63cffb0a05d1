"""Seeded generators for the simulation studies.

``intro1`` / ``intro2``: five exposures at three times, x_i ~ N(0, I_5 kron Psi)
with Psi compound symmetric (0.7), y_i ~ N(theta'x_i, 5) with a rank-1 or
rank-2 theta.

``s1`` / ``s2``: exposures from the longitudinal factor model (k = 5,
phi = 0.5, Lambda ~ N(0, 1), sigma_j^2 = 0.25) and an outcome quadratic in
the latent factors with rank-1 (s1) or rank-2 (s2) main effects; the truth is
the induced regression of y on x.

``s3``: x ~ N(0, CS(0.7) kron CS(0.7)), four exposures with main effects and
ten exposure pairs with same-time interactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import itertools
import logging
import math

import numpy as np
from numpy.typing import NDArray
import pandas as pd

from .const import SIM_K, SIM_N, SIM_P, SIM_T
from .data import ExposureDataset
from .errors import InputError, UsageError
from .induced import InducedCoefficients, induced_coefficients
from .linalg import CompoundSymmetric, cholesky
from .model import ModelSpec

_LOGGER = logging.getLogger(__name__)

INTRO_CORRELATION = 0.7
INTRO_NOISE_VAR = 5.0
INTRO_OMEGA = (0.25, 0.25, 0.5)
INTRO_BETA = (1.0, 3.0, 2.0, -1.0, -2.0)
INTRO_RANK2 = (
    ((0.25, 0.25, 0.5), (1.0, 3.0, 2.0, 0.0, 0.0)),
    ((0.8, 0.1, 0.1), (0.0, 0.0, 0.0, -1.0, -2.0)),
)

FACTOR_PHI = 0.5
FACTOR_SIGMA2 = 0.25
FACTOR_BETA_NONZERO = 2
FACTOR_B_NONZERO = 3
FACTOR_COEF_RANGE = (1.0, 2.0)

S3_CORRELATION = 0.7
S3_MAIN_EXPOSURES = 4
S3_PAIRS = 10
S3_MAIN_RANGE = (0.2, 0.4)
S3_MAIN_SD = 0.05
S3_INT_RANGE = (0.05, 0.15)
S3_INT_SD = 0.01

OUTCOME_NOISE_VAR = 1.0


@dataclass
class SimTruth:
    """True induced coefficients of a simulated dataset."""

    scenario: str
    labels: list[str]
    coefficients: InducedCoefficients
    params: dict[str, NDArray[np.float64]] = field(default_factory=dict)

    @property
    def p(self) -> int:
        return len(self.exposure_names)

    @property
    def exposure_names(self) -> list[str]:
        return list(dict.fromkeys(label.rsplit("_t", 1)[0] for label in self.labels))

    @property
    def alpha(self) -> NDArray[np.float64]:
        return self.coefficients.alpha

    @property
    def gamma(self) -> NDArray[np.float64]:
        return self.coefficients.gamma

    def to_frame(self) -> pd.DataFrame:
        """Long table of (coefficient, value) rows."""
        m = len(self.labels)
        rows = [("alpha0", self.coefficients.alpha0)]
        rows += [(f"alpha[{label}]", value) for label, value in zip(self.labels, self.alpha)]
        rows += [
            (f"gamma[{self.labels[a]},{self.labels[b]}]", self.gamma[a, b])
            for a, b in zip(*np.triu_indices(m))
        ]
        rows += [
            (f"cumulative[{name}]", value)
            for name, value in zip(self.exposure_names, truth_cumulative(self))
        ]
        return pd.DataFrame(rows, columns=["coefficient", "value"])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, scenario: str = "") -> SimTruth:
        """Rebuild the coefficients from :meth:`to_frame` output."""
        values = dict(zip(frame["coefficient"], frame["value"].astype(float)))
        labels = [key[6:-1] for key in values if key.startswith("alpha[")]
        m = len(labels)
        gamma = np.zeros((m, m))
        try:
            for a, b in zip(*np.triu_indices(m)):
                gamma[a, b] = gamma[b, a] = values[f"gamma[{labels[a]},{labels[b]}]"]
            coefs = InducedCoefficients(
                values["alpha0"], np.array([values[f"alpha[{lab}]"] for lab in labels]), gamma
            )
        except KeyError as err:
            raise InputError(f"Truth table lacks coefficient {err}") from err
        return cls(scenario, labels, coefs)


def _labels(p: int, t: int) -> list[str]:
    return [f"e{j + 1}_t{s + 1}" for j in range(p) for s in range(t)]


def _signed_uniform(
    rng: np.random.Generator, size: int | tuple[int, ...], bounds: tuple[float, float]
) -> NDArray[np.float64]:
    """Uniform on (-hi, -lo) U (lo, hi)."""
    magnitude = rng.uniform(bounds[0], bounds[1], size=size)
    return np.where(rng.uniform(size=size) < 0.5, -magnitude, magnitude)


def _cs_rows(
    rng: np.random.Generator, shape: tuple[int, ...], correlation: float
) -> NDArray[np.float64]:
    """Normal draws whose last axis has compound-symmetric covariance."""
    factor = cholesky(CompoundSymmetric(shape[-1], correlation).dense())
    return rng.normal(size=shape) @ factor.T


def _dataset(y: NDArray[np.float64], x: NDArray[np.float64]) -> ExposureDataset:
    return ExposureDataset.from_arrays(
        y, x, exposure_names=[f"e{j + 1}" for j in range(x.shape[1])]
    )


def gen_intro(
    rank: int, n: int = SIM_N, seed: int = 0
) -> tuple[ExposureDataset, SimTruth]:
    """Linear-regression data with low-rank coefficients.

    Args:
        rank: 1 or 2
        n: Number of subjects
        seed: Seed of the generator

    Raises:
        UsageError: For an unsupported rank

    """
    if rank == 1:
        terms = ((INTRO_OMEGA, INTRO_BETA),)
    elif rank == 2:
        terms = INTRO_RANK2
    else:
        raise UsageError(f"Intro simulations have rank 1 or 2, got {rank}")
    rng = np.random.default_rng(seed)
    p, t = len(INTRO_BETA), len(INTRO_OMEGA)
    # theta[j, t] = sum_l beta_lj omega_lt
    theta = sum(np.outer(beta, omega) for omega, beta in terms)
    x = _cs_rows(rng, (n, p, t), INTRO_CORRELATION)
    y = np.einsum("jt,ijt->i", theta, x) + rng.normal(scale=math.sqrt(INTRO_NOISE_VAR), size=n)
    truth = SimTruth(
        f"intro{rank}",
        _labels(p, t),
        InducedCoefficients(0.0, theta.ravel(), np.zeros((p * t, p * t))),
        {"theta": theta},
    )
    return _dataset(y, x), truth


def _factor_scenario(
    rng: np.random.Generator, rank: int, n: int, p: int, t: int, k: int
) -> tuple[ExposureDataset, SimTruth, dict[str, NDArray[np.float64]]]:
    lam = rng.normal(size=(p, k))
    sigma2 = np.full(p, FACTOR_SIGMA2)
    beta = np.zeros((rank, k))
    omega = np.zeros((rank, t))
    for level in range(rank):
        omega[level] = rng.dirichlet(np.ones(t))
        chosen = rng.choice(k, size=FACTOR_BETA_NONZERO, replace=False)
        beta[level, chosen] = _signed_uniform(rng, FACTOR_BETA_NONZERO, FACTOR_COEF_RANGE)
    w_mat = rng.dirichlet(np.ones(t * t)).reshape(t, t)
    b_mat = np.zeros(k * k)
    chosen = rng.choice(k * k, size=FACTOR_B_NONZERO, replace=False)
    b_mat[chosen] = _signed_uniform(rng, FACTOR_B_NONZERO, FACTOR_COEF_RANGE)
    b_mat = b_mat.reshape(k, k)

    eta = _cs_rows(rng, (n, k, t), FACTOR_PHI)
    noise = _cs_rows(rng, (n, p, t), FACTOR_PHI) * np.sqrt(sigma2)[None, :, None]
    x = np.einsum("jh,iht->ijt", lam, eta) + noise
    theta = beta.T @ omega
    mean = np.einsum("ht,iht->i", theta, eta) + np.einsum(
        "iht,hg,ts,igs->i", eta, b_mat, w_mat, eta, optimize=True
    )
    y = mean + rng.normal(scale=math.sqrt(OUTCOME_NOISE_VAR), size=n)

    params = {
        "mu": np.asarray(0.0),
        "beta": beta,
        "omega": omega,
        "B": b_mat,
        "W": w_mat,
        "Lambda": lam,
        "sigma2": sigma2,
        "phi": np.asarray(FACTOR_PHI),
        "eta": eta,
    }
    spec = ModelSpec(n=n, p=p, T=t, k=k, H1=rank)
    coefs = induced_coefficients(params, spec)
    return _dataset(y, x), SimTruth("", _labels(p, t), coefs), params


def _s3(rng: np.random.Generator, n: int, p: int, t: int) -> tuple[ExposureDataset, SimTruth]:
    if p < S3_MAIN_EXPOSURES or math.comb(p, 2) < S3_PAIRS:
        raise UsageError(f"Scenario s3 needs at least {S3_MAIN_EXPOSURES} exposures")
    exp_factor = cholesky(CompoundSymmetric(p, S3_CORRELATION).dense())
    time_factor = cholesky(CompoundSymmetric(t, S3_CORRELATION).dense())
    x = exp_factor @ rng.normal(size=(n, p, t)) @ time_factor.T

    alpha = np.zeros((p, t))
    mains = rng.choice(p, size=S3_MAIN_EXPOSURES, replace=False)
    for j in mains:
        alpha[j] = _signed_uniform(rng, 1, S3_MAIN_RANGE)[0] + rng.normal(scale=S3_MAIN_SD, size=t)

    gamma = np.zeros((p * t, p * t))
    pairs = list(itertools.combinations(range(p), 2))
    for pick in rng.choice(len(pairs), size=S3_PAIRS, replace=False):
        j1, j2 = pairs[pick]
        level = _signed_uniform(rng, 1, S3_INT_RANGE)[0]
        for s, value in enumerate(level + rng.normal(scale=S3_INT_SD, size=t)):
            a, b = j1 * t + s, j2 * t + s
            gamma[a, b] = gamma[b, a] = 0.5 * value

    flat = x.reshape(n, -1)
    mean = flat @ alpha.ravel() + np.einsum("ia,ab,ib->i", flat, gamma, flat)
    y = mean + rng.normal(scale=math.sqrt(OUTCOME_NOISE_VAR), size=n)
    truth = SimTruth("s3", _labels(p, t), InducedCoefficients(0.0, alpha.ravel(), gamma))
    return _dataset(y, x), truth


def gen_scenario(
    scenario: int,
    seed: int = 0,
    n: int = SIM_N,
    p: int = SIM_P,
    t: int = SIM_T,
    k: int = SIM_K,
) -> tuple[ExposureDataset, SimTruth]:
    """Simulate one replicate of scenario 1, 2 or 3.

    Raises:
        UsageError: For an unknown scenario

    """
    rng = np.random.default_rng(seed)
    if scenario in (1, 2):
        data, truth, params = _factor_scenario(rng, scenario, n, p, t, k)
        truth.scenario = f"s{scenario}"
        truth.params = params
    elif scenario == 3:
        data, truth = _s3(rng, n, p, t)
    else:
        raise UsageError(f"Unknown scenario {scenario}")
    _LOGGER.debug("Generated scenario s%d with n=%d, p=%d, T=%d", scenario, n, p, t)
    return data, truth


def simulate(name: str, seed: int = 0, n: int = SIM_N) -> tuple[ExposureDataset, SimTruth]:
    """Dispatch on a scenario name (``intro1``, ``intro2``, ``s1``, ``s2``, ``s3``)."""
    if name in ("intro1", "intro2"):
        return gen_intro(int(name[-1]), n=n, seed=seed)
    if name in ("s1", "s2", "s3"):
        return gen_scenario(int(name[-1]), seed=seed, n=n)
    raise UsageError(f"Unknown scenario {name!r}")


def truth_cumulative(truth: SimTruth) -> NDArray[np.float64]:
    """E[y | x = d_j] - E[y | x = -d_j] per exposure, d_j = 1 at every time of exposure j."""
    t = len(truth.labels) // truth.p
    values = np.empty(truth.p)
    for j in range(truth.p):
        d = np.zeros(len(truth.labels))
        d[j * t : (j + 1) * t] = 1.0
        values[j] = truth.coefficients.mean(d) - truth.coefficients.mean(-d)
    return values
