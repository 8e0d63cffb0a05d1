"""Correlated quadratic regression baseline.

y_i is regressed on every exposure measurement and every pairwise product of
measurements. Main-effect coefficients of one exposure share a
compound-symmetric prior across time, and so do the interaction coefficients
of one exposure pair. The model has no latent structure, so missing exposures
must be imputed before the design is built.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import block_diag

from .const import IG_RATE, IG_SHAPE, INTERCEPT_COV_VAR
from .errors import DomainError, EvaluationError, InputError, UsageError
from .layout import IDENTITY, LOG, LOGIT, ParameterLayout, ParamView
from .linalg import CompoundSymmetric

_LOGGER = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MAIN = "main"
INT = "int"


@dataclass(frozen=True)
class CqrTerm:
    """One design column: MAIN(j, t) or INT(j1, j2, t1, t2), 0-based."""

    kind: str
    j1: int
    t1: int
    j2: int = -1
    t2: int = -1

    @property
    def label(self) -> str:
        if self.kind == MAIN:
            return f"MAIN({self.j1 + 1},{self.t1 + 1})"
        return f"INT({self.j1 + 1},{self.j2 + 1},{self.t1 + 1},{self.t2 + 1})"


def canonicalize(j1: int, j2: int, t1: int, t2: int) -> tuple[int, int, int, int]:
    """Order an interaction so that j2 <= j1, and t2 <= t1 within one exposure."""
    if j2 > j1 or (j1 == j2 and t2 > t1):
        return j2, j1, t2, t1
    return j1, j2, t1, t2


def enumerate_terms(p: int, t: int) -> list[CqrTerm]:
    """All design terms in canonical order: main effects, then interactions by pair."""
    terms = [CqrTerm(MAIN, j, s) for j in range(p) for s in range(t)]
    for j1 in range(p):
        for j2 in range(j1 + 1):
            for t1 in range(t):
                for t2 in range(t):
                    if j1 == j2 and t2 > t1:
                        continue
                    terms.append(CqrTerm(INT, j1, t1, j2, t2))
    return terms


def column_count(p: int, t: int) -> int:
    """m = pT + p T (T + 1) / 2 + C(p, 2) T^2."""
    return p * t + p * t * (t + 1) // 2 + math.comb(p, 2) * t * t


def interaction_column(
    x: NDArray[np.float64], j1: int, j2: int, t1: int, t2: int
) -> NDArray[np.float64]:
    """Product column x[:, j1, t1] * x[:, j2, t2]."""
    return x[:, j1, t1] * x[:, j2, t2]


@dataclass(frozen=True)
class CqrDesign:
    """Quadratic design matrix with its column tags."""

    terms: tuple[CqrTerm, ...]
    matrix: NDArray[np.float64]
    p: int
    T: int  # pylint: disable=invalid-name

    @property
    def n_main(self) -> int:
        return self.p * self.T

    @property
    def n_int(self) -> int:
        return len(self.terms) - self.n_main

    def labels(self) -> list[str]:
        return [term.label for term in self.terms]

    def pair_blocks(self) -> dict[tuple[int, int], NDArray[np.int64]]:
        """Positions within the interaction vector of each exposure pair's terms."""
        blocks: dict[tuple[int, int], list[int]] = {}
        for pos, term in enumerate(self.terms[self.n_main:]):
            blocks.setdefault((term.j1, term.j2), []).append(pos)
        return {pair: np.asarray(idx) for pair, idx in blocks.items()}

    def coordinate_pairs(self) -> NDArray[np.int64]:
        """(a, b) positions in the exposure-major pT vector of every interaction."""
        return np.asarray(
            [
                (term.j1 * self.T + term.t1, term.j2 * self.T + term.t2)
                for term in self.terms[self.n_main:]
            ],
            dtype=int,
        ).reshape(-1, 2)


def build_design(x: NDArray[np.float64]) -> CqrDesign:
    """Expand an (n, p, T) exposure tensor into the quadratic design.

    Raises:
        InputError: If the tensor is not 3-d or holds missing values

    """
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 3:
        raise InputError(f"Exposure tensor must be (n, p, T), got shape {arr.shape}")
    if np.isnan(arr).any():
        raise InputError("Quadratic design needs complete exposures; impute first")
    n, p, t = arr.shape
    terms = enumerate_terms(p, t)
    matrix = np.empty((n, len(terms)))
    for col, term in enumerate(terms):
        if term.kind == MAIN:
            matrix[:, col] = arr[:, term.j1, term.t1]
        else:
            matrix[:, col] = interaction_column(arr, term.j1, term.j2, term.t1, term.t2)
    _LOGGER.debug("Built quadratic design with %d columns for p=%d, T=%d", len(terms), p, t)
    return CqrDesign(tuple(terms), matrix, p, t)


@dataclass(frozen=True)
class CqrParams:
    """Constrained parameters of the quadratic regression."""

    mu: float
    cov: NDArray[np.float64]
    theta: NDArray[np.float64]
    gamma: NDArray[np.float64]
    sigma2: float
    nu_main: float
    nu_int: float
    psi_main: float
    psi_int: float

    def __post_init__(self) -> None:
        """Check the support."""
        if min(self.sigma2, self.nu_main, self.nu_int) <= 0:
            raise DomainError("Variances must be positive")
        if not (0 < self.psi_main < 1 and 0 < self.psi_int < 1):
            raise DomainError("Correlations must lie in (0, 1)")

    @classmethod
    def from_view(cls, view: ParamView) -> CqrParams:
        """Build from a constrained parameter view."""
        return cls(
            mu=float(view["mu"]),
            cov=np.asarray(view["cov"]),
            theta=np.asarray(view["theta"]).ravel(),
            gamma=np.asarray(view["gamma"]),
            sigma2=float(view["sigma2"]),
            nu_main=float(view["nu_main"]),
            nu_int=float(view["nu_int"]),
            psi_main=float(view["psi_main"]),
            psi_int=float(view["psi_int"]),
        )


@dataclass(frozen=True)
class CqrPriorCovariance:
    """Block-diagonal prior covariance of theta and gamma."""

    main_blocks: tuple[NDArray[np.float64], ...]
    int_blocks: tuple[NDArray[np.float64], ...]

    def theta(self) -> NDArray[np.float64]:
        return block_diag(*self.main_blocks)

    def gamma(self) -> NDArray[np.float64]:
        if not self.int_blocks:
            return np.zeros((0, 0))
        return block_diag(*self.int_blocks)


def cqr_prior_covariance(
    p: int, t: int, nu_main: float, nu_int: float, psi_main: float, psi_int: float
) -> CqrPriorCovariance:
    """Prior covariance blocks: one per exposure (theta), one per pair (gamma).

    Raises:
        DomainError: If a variance is non-positive or a correlation leaves [0, 1)

    """
    if nu_main <= 0 or nu_int <= 0:
        raise DomainError("Prior variances must be positive")
    for psi in (psi_main, psi_int):
        if not 0 <= psi < 1:
            raise DomainError(f"Prior correlation {psi} outside [0, 1)")
    main = tuple(nu_main * CompoundSymmetric(t, psi_main).dense() for _ in range(p))
    ints = tuple(
        nu_int * CompoundSymmetric(size, psi_int).dense() for size in _pair_sizes(p, t)
    )
    return CqrPriorCovariance(main, ints)


def _pair_sizes(p: int, t: int) -> list[int]:
    return [t * (t + 1) // 2 if j1 == j2 else t * t for j1 in range(p) for j2 in range(j1 + 1)]


def build_cqr_layout(design: CqrDesign, c: int = 0) -> ParameterLayout:
    """Unconstrained layout of the quadratic regression."""
    return ParameterLayout(
        [
            ("mu", (), IDENTITY),
            ("cov", (c,), IDENTITY),
            ("theta", (design.p, design.T), IDENTITY),
            ("gamma", (design.n_int,), IDENTITY),
            ("sigma2", (), LOG),
            ("nu_main", (), LOG),
            ("nu_int", (), LOG),
            ("psi_main", (), LOGIT),
            ("psi_int", (), LOGIT),
        ]
    )


def _cs_block_prior(
    values: NDArray[np.float64], log_nu: float, psi: float
) -> tuple[float, NDArray[np.float64], float, float]:
    """Rows of ``values`` iid N(0, nu CS(psi)).

    Returns:
        (log density, gradient wrt values, gradient wrt log nu, gradient wrt psi)

    """
    rows, dim = values.shape
    if rows == 0:
        return 0.0, values.copy(), 0.0, 0.0
    nu = math.exp(log_nu)
    cs = CompoundSymmetric(dim, psi)
    solved = values @ cs.inverse()
    quad = float(np.sum(solved * values))
    lp = -0.5 * rows * (dim * (LOG_2PI + log_nu) + cs.logdet()) - 0.5 * quad / nu
    g_log_nu = -0.5 * rows * dim + 0.5 * quad / nu
    sums = solved.sum(axis=1)
    g_psi = -0.5 * rows * cs.dlogdet() + 0.5 * float(np.sum(sums**2) - np.sum(solved**2)) / nu
    return lp, -solved / nu, g_log_nu, g_psi


class CqrPosterior:
    """Posterior of the quadratic regression for one design and response."""

    def __init__(
        self,
        design: CqrDesign,
        y: NDArray[np.float64],
        z: NDArray[np.float64] | None = None,
    ) -> None:
        """Initialize the posterior.

        Args:
            design: Quadratic design (n rows)
            y: Response of length n
            z: Optional (n, c) covariates

        """
        self.design = design
        self._y = np.asarray(y, dtype=float)
        n = self._y.size
        if design.matrix.shape[0] != n:
            raise UsageError("Design and response have different lengths")
        self._z = np.zeros((n, 0)) if z is None else np.asarray(z, dtype=float).reshape(n, -1)
        self.layout = build_cqr_layout(design, self._z.shape[1])
        self._main = design.matrix[:, : design.n_main]
        self._int = design.matrix[:, design.n_main:]
        pairs = design.pair_blocks()
        own = [idx for (j1, j2), idx in pairs.items() if j1 == j2]
        cross = [idx for (j1, j2), idx in pairs.items() if j1 != j2]
        self._own = np.vstack(own) if own else np.zeros((0, 0), dtype=int)
        self._cross = np.vstack(cross) if cross else np.zeros((0, 0), dtype=int)

    @property
    def dim(self) -> int:
        return self.layout.dim

    def parameter_names(self) -> list[str]:
        names = self.layout.names()
        block = self.layout["gamma"]
        names[block.slice] = [
            f"gamma[{label[4:-1]}]" for label in self.design.labels()[self.design.n_main:]
        ]
        return names

    def constrain(self, u: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.layout.constrained_flat(u)

    def params(self, u: NDArray[np.float64]) -> CqrParams:
        """Constrained parameters at ``u``."""
        return CqrParams.from_view(self.layout.to_constrained(u))

    def initial_point(self, rng: np.random.Generator) -> NDArray[np.float64]:
        u = rng.uniform(-1.0, 1.0, size=self.dim)
        for name in ("sigma2", "nu_main", "nu_int"):
            u[self.layout[name].slice] = 0.0
        return u

    def log_density(self, u: NDArray[np.float64]) -> float:
        return self._evaluate(u)[0]

    def log_density_and_grad(
        self, u: NDArray[np.float64]
    ) -> tuple[float, NDArray[np.float64]]:
        return self._evaluate(u)

    def _evaluate(self, u: NDArray[np.float64]) -> tuple[float, NDArray[np.float64]]:
        raw = self.layout.unpack(u)
        par = self.layout.to_constrained(u)
        grad = {b.name: np.zeros(b.shape) for b in self.layout.blocks}
        values: dict[str, float] = {}

        for block in ("mu", "cov"):
            value = raw[block]
            norm = value.size * (LOG_2PI + math.log(INTERCEPT_COV_VAR))
            values[block] = -0.5 * norm - 0.5 * float(np.sum(value**2)) / INTERCEPT_COV_VAR
            grad[block] = -value / INTERCEPT_COV_VAR

        for block in ("sigma2", "nu_main", "nu_int"):
            log_v = float(raw[block])
            values[block] = (
                IG_SHAPE * math.log(IG_RATE) - math.lgamma(IG_SHAPE) - IG_SHAPE * log_v
                - IG_RATE * math.exp(-log_v)
            )
            grad[block] = np.asarray(-IG_SHAPE + IG_RATE * math.exp(-log_v))

        psi_main, psi_int = float(par["psi_main"]), float(par["psi_int"])
        if not (0 < psi_main < 1 and 0 < psi_int < 1):
            raise EvaluationError("psi", "Prior correlation left (0, 1)")
        values["psi"] = sum(math.log(v) + math.log1p(-v) for v in (psi_main, psi_int))

        lp, g_theta, g_nu, g_psi = _cs_block_prior(raw["theta"], float(raw["nu_main"]), psi_main)
        values["theta"] = lp
        grad["theta"] = g_theta
        grad["nu_main"] = grad["nu_main"] + g_nu
        g_psi_main = g_psi

        gamma = raw["gamma"]
        g_gamma = np.zeros_like(gamma)
        g_psi_int = 0.0
        values["gamma"] = 0.0
        for idx in (self._own, self._cross):
            if idx.size == 0:
                continue
            lp, g_block, g_nu, g_psi = _cs_block_prior(gamma[idx], float(raw["nu_int"]), psi_int)
            values["gamma"] += lp
            g_gamma[idx] = g_block
            grad["nu_int"] = grad["nu_int"] + g_nu
            g_psi_int += g_psi
        grad["gamma"] = g_gamma

        mean = (
            float(raw["mu"])
            + self._z @ raw["cov"]
            + self._main @ raw["theta"].ravel()
            + self._int @ gamma
        )
        resid = self._y - mean
        sigma2 = float(par["sigma2"])
        ss = float(resid @ resid)
        n = self._y.size
        values["y"] = -0.5 * n * (LOG_2PI + float(raw["sigma2"])) - 0.5 * ss / sigma2
        g_mean = resid / sigma2
        grad["mu"] = grad["mu"] + g_mean.sum()
        grad["cov"] = grad["cov"] + self._z.T @ g_mean
        grad["theta"] = grad["theta"] + (self._main.T @ g_mean).reshape(grad["theta"].shape)
        grad["gamma"] = grad["gamma"] + self._int.T @ g_mean
        grad["sigma2"] = grad["sigma2"] + (-0.5 * n + 0.5 * ss / sigma2)

        grad["psi_main"] = np.asarray(g_psi_main * psi_main * (1 - psi_main) + 1 - 2 * psi_main)
        grad["psi_int"] = np.asarray(g_psi_int * psi_int * (1 - psi_int) + 1 - 2 * psi_int)

        for block, value in values.items():
            if not math.isfinite(value):
                raise EvaluationError(block)
        flat = self.layout.flatten(grad)
        if not np.all(np.isfinite(flat)):
            raise EvaluationError("gradient", "Non-finite gradient")
        return float(sum(values.values())), flat


def cqr_log_posterior(
    design: CqrDesign,
    y: NDArray[np.float64],
    u: NDArray[np.float64],
    z: NDArray[np.float64] | None = None,
) -> float:
    """Log posterior of the quadratic regression at unconstrained ``u``."""
    return CqrPosterior(design, y, z).log_density(u)


def grad_cqr_log_posterior(
    design: CqrDesign,
    y: NDArray[np.float64],
    u: NDArray[np.float64],
    z: NDArray[np.float64] | None = None,
) -> NDArray[np.float64]:
    """Gradient of :func:`cqr_log_posterior`."""
    return CqrPosterior(design, y, z).log_density_and_grad(u)[1]


def cqr_effects(
    design: CqrDesign, params: CqrParams
) -> tuple[float, NDArray[np.float64], NDArray[np.float64]]:
    """Map quadratic-regression coefficients to (alpha0, alpha, Gamma).

    Gamma is symmetric with x' Gamma x equal to the interaction part of the
    mean: squared terms sit on the diagonal, cross terms are split in half.
    """
    pt = design.n_main
    gamma_mat = np.zeros((pt, pt))
    for (a, b), value in zip(design.coordinate_pairs(), params.gamma):
        if a == b:
            gamma_mat[a, a] += value
        else:
            gamma_mat[a, b] += 0.5 * value
            gamma_mat[b, a] += 0.5 * value
    return params.mu, np.asarray(params.theta, dtype=float), gamma_mat
