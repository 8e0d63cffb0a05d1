"""Joint longitudinal factor model and the direct low-rank regressions.

Two posterior families share one calling convention (``log_density``,
``log_density_and_grad``, ``initial_point``) so the sampler can treat them
alike:

* :class:`LowFRPosterior` - the full joint model. Exposures follow a factor
  model with Kronecker covariance, x_i = (Lambda kron I_T) eta_i + eps_i,
  eta_i ~ N(0, I_k kron Phi), eps_i ~ N(0, Sigma kron Phi); the outcome is
  quadratic in the latent factors, y_i ~ N(mu + z_i'c + theta'eta_i +
  eta_i' Omega eta_i, sigma_y^2), with theta = vec(sum_l omega_l beta_l') and
  Omega = B kron W. Multiplicative gamma process priors shrink the beta/omega
  and B/W blocks. Missing exposures are parameters and enter through the
  x-likelihood.
* :class:`DirectPosterior` - the low-rank linear regression of y on x with
  theta = vec(sum_{l<=R} omega_l beta_l'), or an unstructured theta (rank FULL).

Latent factors are stored as an (n, k, T) array, exposures as (n, p, T); both
flatten row-major into the factor-major / exposure-major vectors used in the
formulas. The density is evaluated on the unconstrained scale and includes
the log-Jacobian of every log / logit transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import enum
import logging
import math

import numpy as np
from numpy.typing import NDArray
from scipy.special import digamma, gammaln

from .const import (
    A_RATE,
    A_SHAPE,
    DIRECT_COEF_VAR,
    IG_RATE,
    IG_SHAPE,
    INTERCEPT_COV_VAR,
    LOADING_VAR,
    SEX_TAU_SHAPE,
    XI_RATE,
    XI_SHAPE,
)
from .data import ExposureDataset
from .errors import DomainError, EvaluationError, UsageError
from .layout import IDENTITY, LOG, LOGIT, ParameterLayout, ParamView
from .linalg import CompoundSymmetric

_LOGGER = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

Vector = NDArray[np.float64]


class Variant(enum.StrEnum):
    """Model variants."""

    LOWFR = "lowfr"
    LOWFR_SEX_INT = "lowfr_sex_int"
    DIRECT = "direct"


@dataclass(frozen=True)
class HyperParams:
    """Prior hyperparameters of the joint model."""

    loading_var: float = LOADING_VAR
    intercept_cov_var: float = INTERCEPT_COV_VAR
    direct_coef_var: float = DIRECT_COEF_VAR
    ig_shape: float = IG_SHAPE
    ig_rate: float = IG_RATE
    xi_shape: float = XI_SHAPE
    xi_rate: float = XI_RATE
    a_shape: float = A_SHAPE
    a_rate: float = A_RATE
    sex_tau_shape: float = SEX_TAU_SHAPE

    def __post_init__(self) -> None:
        """Reject non-positive hyperparameters."""
        for name, value in vars(self).items():
            if not value > 0:
                raise DomainError(f"Hyperparameter {name} must be positive, got {value}")


@dataclass(frozen=True)
class ModelSpec:
    """Dimensions, variant and hyperparameters of one model.

    ``rank`` is only used by the direct variant; ``None`` means FULL (an
    unstructured theta). ``sex_index`` is the covariate column of the binary
    indicator that the sex-interaction variant multiplies into the main effects.
    """

    n: int
    p: int
    T: int  # pylint: disable=invalid-name
    k: int = 1
    H1: int | None = None  # pylint: disable=invalid-name
    H2: int = 1  # pylint: disable=invalid-name
    c: int = 0
    n_missing: int = 0
    variant: Variant = Variant.LOWFR
    rank: int | None = None
    sex_index: int | None = None
    hyper: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self) -> None:
        """Resolve H1 and check the invariants."""
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.H1 is None:
            object.__setattr__(self, "H1", min(self.p, self.T))
        if self.n < 0 or self.p < 1 or self.T < 1 or self.c < 0 or self.n_missing < 0:
            raise UsageError(f"Invalid model dimensions {self}")
        if self.H2 != 1:
            raise UsageError("Only H2 = 1 is supported")
        if self.variant is Variant.DIRECT:
            if self.rank is not None and not 1 <= self.rank <= min(self.p, self.T):
                raise UsageError(f"Direct rank must be in 1..{min(self.p, self.T)} or FULL")
            return
        if not 1 <= self.k <= self.p:
            raise UsageError(f"k must satisfy 1 <= k <= p = {self.p}, got {self.k}")
        if self.H1 < 1:
            raise UsageError("H1 must be positive")
        if self.variant is Variant.LOWFR_SEX_INT:
            if self.sex_index is None or not 0 <= self.sex_index < self.c:
                raise UsageError("The sex-interaction variant needs a designated covariate column")

    @classmethod
    def for_data(
        cls,
        data: ExposureDataset,
        variant: Variant | str = Variant.LOWFR,
        k: int = 1,
        rank: int | None = None,
        sex_col: str | None = None,
        hyper: HyperParams | None = None,
    ) -> ModelSpec:
        """Build the spec matching a dataset."""
        variant = Variant(variant)
        sex_index = None
        if variant is Variant.LOWFR_SEX_INT:
            if sex_col is None:
                raise UsageError("The sex-interaction variant needs --sex-col")
            sex_index = data.covariate_index(sex_col)
            values = np.unique(data.z[:, sex_index])
            if not set(values.tolist()) <= {0.0, 1.0}:
                raise UsageError(f"Covariate {sex_col!r} must be binary 0/1")
        return cls(
            n=data.n,
            p=data.p,
            T=data.T,
            k=k,
            c=data.c,
            n_missing=data.n_missing if variant is not Variant.DIRECT else 0,
            variant=variant,
            rank=rank,
            sex_index=sex_index,
            hyper=hyper or HyperParams(),
        )


def build_layout(spec: ModelSpec) -> ParameterLayout:
    """Return the flat parameter layout of a spec."""
    n, p, t, k, h, c = spec.n, spec.p, spec.T, spec.k, spec.H1, spec.c
    if spec.variant is Variant.DIRECT:
        blocks = [("mu", (), IDENTITY), ("cov", (c,), IDENTITY)]
        if spec.rank is None:
            blocks.append(("theta", (p, t), IDENTITY))
        else:
            blocks += [
                ("beta", (spec.rank, p), IDENTITY),
                ("omega", (spec.rank, t), IDENTITY),
            ]
        blocks.append(("sigma2_y", (), LOG))
        return ParameterLayout(blocks)

    blocks = [
        ("mu", (), IDENTITY),
        ("cov", (c,), IDENTITY),
        ("beta", (h, k), IDENTITY),
        ("omega", (h, t), IDENTITY),
        ("xi_beta", (h, k), LOG),
        ("xi_omega", (h, t), LOG),
        ("delta", (h,), LOG),
        ("a1", (), LOG),
        ("a2", (), LOG),
        ("B", (k, k), IDENTITY),
        ("W", (t, t), IDENTITY),
        ("xi_B", (k, k), LOG),
        ("xi_W", (t, t), LOG),
        ("delta_int", (), LOG),
        ("a_int", (), LOG),
        ("Lambda", (p, k), IDENTITY),
        ("sigma2", (p,), LOG),
        ("sigma2_y", (), LOG),
        ("phi", (), LOGIT),
        ("eta", (n, k, t), IDENTITY),
        ("x_missing", (spec.n_missing,), IDENTITY),
    ]
    if spec.variant is Variant.LOWFR_SEX_INT:
        blocks += [
            ("beta_int", (k,), IDENTITY),
            ("omega_int", (t,), IDENTITY),
            ("xi_beta_int", (k,), LOG),
            ("xi_omega_int", (t,), LOG),
            ("tau_sex", (), LOG),
        ]
    return ParameterLayout(blocks)


# ---------------------------------------------------------------------------
# Log-density building blocks on the unconstrained scale
# ---------------------------------------------------------------------------


def _normal_term(value: Vector, var: float) -> tuple[float, Vector]:
    """Sum of N(0, var) log densities and its gradient."""
    value = np.asarray(value)
    lp = -0.5 * value.size * (LOG_2PI + math.log(var)) - 0.5 * float(np.sum(value**2)) / var
    return lp, -value / var


def _log_gamma_term(log_value: Vector, shape: float, rate: float) -> tuple[float, Vector]:
    """Gamma(shape, rate) prior on exp(log_value) plus the log-Jacobian."""
    log_value = np.asarray(log_value)
    value = np.exp(log_value)
    lp = (
        log_value.size * (shape * math.log(rate) - math.lgamma(shape))
        + shape * float(np.sum(log_value))
        - rate * float(np.sum(value))
    )
    return lp, shape - rate * value


def _log_inv_gamma_term(log_value: Vector, shape: float, rate: float) -> tuple[float, Vector]:
    """Inverse-gamma prior on exp(log_value) plus the log-Jacobian."""
    log_value = np.asarray(log_value)
    inv = np.exp(-log_value)
    lp = (
        log_value.size * (shape * math.log(rate) - math.lgamma(shape))
        - shape * float(np.sum(log_value))
        - rate * float(np.sum(inv))
    )
    return lp, -shape + rate * inv


def _scaled_normal_term(
    value: Vector, log_prec: Vector
) -> tuple[float, Vector, Vector]:
    """N(0, 1 / exp(log_prec)) log densities.

    Returns:
        (log density, gradient wrt value, gradient wrt log_prec)

    """
    prec = np.exp(log_prec)
    sq = prec * value**2
    lp = float(np.sum(0.5 * log_prec - 0.5 * LOG_2PI - 0.5 * sq))
    return lp, -prec * value, 0.5 - 0.5 * sq


class _Terms:
    """Accumulates log-density terms and unconstrained gradients per block."""

    def __init__(self, layout: ParameterLayout, with_grad: bool) -> None:
        self.values: dict[str, float] = {}
        self.with_grad = with_grad
        self.grad = (
            {b.name: np.zeros(b.shape) for b in layout.blocks} if with_grad else {}
        )

    def add(self, block: str, value: float) -> None:
        self.values[block] = self.values.get(block, 0.0) + value

    def add_grad(self, block: str, grad: Vector) -> None:
        if self.with_grad:
            self.grad[block] = self.grad[block] + grad

    def total(self) -> float:
        for block, value in self.values.items():
            if not math.isfinite(value):
                raise EvaluationError(block)
        return float(sum(self.values.values()))

    def flat_grad(self, layout: ParameterLayout) -> Vector:
        flat = layout.flatten(self.grad)
        if not np.all(np.isfinite(flat)):
            for block in layout.blocks:
                if not np.all(np.isfinite(self.grad[block.name])):
                    raise EvaluationError(block.name, f"Non-finite gradient in block {block.name}")
        return flat


def _mgp_shrinkage(
    terms: _Terms,
    raw: ParamView,
    coefs: tuple[str, ...],
    locals_: tuple[str, ...],
    log_tau: Vector,
    hyper: HyperParams,
) -> Vector:
    """Scaled-normal priors for coefficient blocks sharing row-wise global scales.

    Each coefficient block has shape (rows, m) with precision
    exp(log_xi + log_tau[row]).

    Returns:
        Gradient with respect to log_tau
    """
    g_log_tau = np.zeros_like(log_tau)
    for coef, local in zip(coefs, locals_):
        value = raw[coef]
        log_xi = raw[local]
        shape = value.shape
        tau_b = log_tau.reshape((-1,) + (1,) * (value.ndim - 1)) if log_tau.ndim else log_tau
        lp, g_val, g_log_prec = _scaled_normal_term(value, log_xi + tau_b)
        terms.add(coef, lp)
        terms.add_grad(coef, g_val)
        terms.add_grad(local, g_log_prec)
        if log_tau.ndim:
            g_log_tau += g_log_prec.reshape(shape[0], -1).sum(axis=1)
        else:
            g_log_tau = g_log_tau + g_log_prec.sum()
        lp_xi, g_xi = _log_gamma_term(log_xi, hyper.xi_shape, hyper.xi_rate)
        terms.add(local, lp_xi)
        terms.add_grad(local, g_xi)
    return g_log_tau


def _gamma_shape_link(
    terms: _Terms, log_delta: Vector, shape_block: str, log_shape: float
) -> Vector:
    """Gamma(a, 1) prior on exp(log_delta) with a = exp(log_shape) learned.

    Returns:
        Gradient with respect to log_delta
    """
    a = math.exp(log_shape)
    lp = float(np.sum(a * log_delta - np.exp(log_delta))) - log_delta.size * gammaln(a)
    terms.add(shape_block, lp)
    terms.add_grad(shape_block, np.asarray(a * float(np.sum(log_delta - digamma(a)))))
    return a - np.exp(log_delta)


class LowFRPosterior:
    """Posterior of the joint factor model for one dataset."""

    def __init__(self, spec: ModelSpec, data: ExposureDataset) -> None:
        """Initialize the posterior.

        Args:
            spec: Model spec (variant LOWFR or LOWFR_SEX_INT)
            data: Dataset, ideally standardized

        """
        if spec.variant is Variant.DIRECT:
            raise UsageError("LowFRPosterior does not handle the direct variant")
        if (spec.n, spec.p, spec.T, spec.c, spec.n_missing) != (
            data.n, data.p, data.T, data.c, data.n_missing,
        ):
            raise UsageError("Model spec does not match the dataset dimensions")
        self.spec = spec
        self.layout = build_layout(spec)
        self._y = np.asarray(data.y, dtype=float)
        self._z = np.asarray(data.z, dtype=float)
        self._x_obs = np.where(data.mask, 0.0, data.x)
        self._missing = tuple(data.missing_index().T)
        self._sex = (
            self._z[:, spec.sex_index] if spec.variant is Variant.LOWFR_SEX_INT else None
        )

    @property
    def dim(self) -> int:
        return self.layout.dim

    def parameter_names(self) -> list[str]:
        """Constrained labels; imputed exposures are labelled by (row, exposure, time)."""
        names = self.layout.names()
        block = self.layout["x_missing"]
        names[block.slice] = [
            f"x_missing[{i + 1},{j + 1},{t + 1}]" for i, j, t in zip(*self._missing)
        ]
        return names

    def constrain(self, u: Vector) -> Vector:
        return self.layout.constrained_flat(u)

    def log_density(self, u: Vector) -> float:
        return self._evaluate(u, with_grad=False)[0]

    def log_density_and_grad(self, u: Vector) -> tuple[float, Vector]:
        value, grad = self._evaluate(u, with_grad=True)
        assert grad is not None
        return value, grad

    def initial_point(self, rng: np.random.Generator) -> Vector:
        return initial_point(self.spec, rng)

    def exposures(self, x_missing: Vector) -> NDArray[np.float64]:
        """Complete exposure tensor with imputed values filled in."""
        x = self._x_obs.copy()
        if self._missing and len(self._missing[0]):
            x[self._missing] = x_missing
        return x

    # pylint: disable-next=too-many-statements
    def _evaluate(self, u: Vector, with_grad: bool) -> tuple[float, Vector | None]:
        spec, hyper = self.spec, self.spec.hyper
        raw = self.layout.unpack(u)
        par = self.layout.to_constrained(u)
        terms = _Terms(self.layout, with_grad)
        n, p, t, k = spec.n, spec.p, spec.T, spec.k

        # intercept and covariate coefficients
        for block in ("mu", "cov"):
            lp, g = _normal_term(raw[block], hyper.intercept_cov_var)
            terms.add(block, lp)
            terms.add_grad(block, g)

        # main-effect MGP: tau_l = prod_{m<=l} delta_m
        log_delta = raw["delta"]
        log_tau = np.cumsum(log_delta)
        g_log_tau = _mgp_shrinkage(
            terms, raw, ("beta", "omega"), ("xi_beta", "xi_omega"), log_tau, hyper
        )
        g_log_delta = np.cumsum(g_log_tau[::-1])[::-1]
        g_log_delta = g_log_delta + np.concatenate(
            [
                _gamma_shape_link(terms, log_delta[:1], "a1", float(raw["a1"])),
                _gamma_shape_link(terms, log_delta[1:], "a2", float(raw["a2"])),
            ]
        )
        terms.add_grad("delta", g_log_delta)

        # interaction MGP: one level, tau_int = delta_int
        log_delta_int = raw["delta_int"]
        g_tau_int = _mgp_shrinkage(
            terms, raw, ("B", "W"), ("xi_B", "xi_W"), log_delta_int, hyper
        )
        g_tau_int = g_tau_int + _gamma_shape_link(
            terms, np.atleast_1d(log_delta_int), "a_int", float(raw["a_int"])
        )[0]
        terms.add_grad("delta_int", np.asarray(g_tau_int))

        for block in ("a1", "a2", "a_int"):
            lp, g = _log_gamma_term(raw[block], hyper.a_shape, hyper.a_rate)
            terms.add(block, lp)
            terms.add_grad(block, g)

        lp, g = _normal_term(raw["Lambda"], hyper.loading_var)
        terms.add("Lambda", lp)
        terms.add_grad("Lambda", g)

        for block in ("sigma2", "sigma2_y"):
            lp, g = _log_inv_gamma_term(raw[block], hyper.ig_shape, hyper.ig_rate)
            terms.add(block, lp)
            terms.add_grad(block, g)

        if spec.variant is Variant.LOWFR_SEX_INT:
            log_tau_sex = raw["tau_sex"]
            g_tau_sex = _mgp_shrinkage(
                terms,
                raw,
                ("beta_int", "omega_int"),
                ("xi_beta_int", "xi_omega_int"),
                log_tau_sex,
                hyper,
            )
            lp, g = _log_gamma_term(log_tau_sex, hyper.sex_tau_shape, 1.0)
            terms.add("tau_sex", lp)
            terms.add_grad("tau_sex", g + g_tau_sex)

        # phi ~ Uniform(0, 1): only the logit Jacobian remains
        phi = float(par["phi"])
        if not 0.0 < phi < 1.0:
            raise EvaluationError("phi", "phi left (0, 1)")
        terms.add("phi", math.log(phi) + math.log1p(-phi))
        cs = CompoundSymmetric(t, phi)
        prec_t = cs.inverse()
        dprec_t = cs.dinverse()
        logdet, dlogdet = cs.logdet(), cs.dlogdet()
        g_phi = 0.0

        # latent factors: eta_i ~ N(0, I_k kron Phi)
        eta = raw["eta"]
        eta_prec = eta @ prec_t
        terms.add(
            "eta",
            -0.5 * n * k * (t * LOG_2PI + logdet) - 0.5 * float(np.sum(eta_prec * eta)),
        )
        g_eta = -eta_prec
        if with_grad:
            m_eta = np.einsum("iht,ihs->ts", eta, eta)
            g_phi += -0.5 * n * k * dlogdet - 0.5 * float(np.sum(dprec_t * m_eta))

        # exposures: rows of x_i - Lambda E_i are N(0, sigma_j^2 Phi)
        lam = raw["Lambda"]
        sigma2 = par["sigma2"]
        x = self.exposures(raw["x_missing"])
        resid = x - np.einsum("jh,iht->ijt", lam, eta)
        resid_prec = resid @ prec_t
        quad = np.einsum("ijt,ijt->j", resid_prec, resid)
        terms.add(
            "x",
            -0.5 * n * p * (t * LOG_2PI + logdet)
            - 0.5 * n * t * float(np.sum(raw["sigma2"]))
            - 0.5 * float(np.sum(quad / sigma2)),
        )
        if with_grad:
            scaled = resid_prec / sigma2[None, :, None]
            g_eta += np.einsum("jh,ijt->iht", lam, scaled)
            terms.add_grad("Lambda", np.einsum("ijt,iht->jh", scaled, eta))
            if self._missing and len(self._missing[0]):
                terms.add_grad("x_missing", -scaled[self._missing])
            terms.add_grad("sigma2", -0.5 * n * t + 0.5 * quad / sigma2)
            m_x = np.einsum("ijt,ijs,j->ts", resid, resid, 1.0 / sigma2)
            g_phi += -0.5 * n * p * dlogdet - 0.5 * float(np.sum(dprec_t * m_x))

        # outcome: mu + z'c + theta'eta + eta' (B kron W) eta
        beta, omega = raw["beta"], raw["omega"]
        b_mat, w_mat = raw["B"], raw["W"]
        theta = beta.T @ omega
        bt_eta = np.einsum("hg,iht->igt", b_mat, eta)
        bt_eta_w = bt_eta @ w_mat
        quad_y = np.einsum("igs,igs->i", bt_eta_w, eta)
        mean = float(raw["mu"]) + self._z @ raw["cov"] + np.einsum("ht,iht->i", theta, eta) + quad_y
        if self._sex is not None:
            theta_sex = np.outer(raw["beta_int"], raw["omega_int"])
            mean = mean + self._sex * np.einsum("ht,iht->i", theta_sex, eta)
        sigma2_y = float(par["sigma2_y"])
        resid_y = self._y - mean
        ss = float(resid_y @ resid_y)
        terms.add("y", -0.5 * n * (LOG_2PI + float(raw["sigma2_y"])) - 0.5 * ss / sigma2_y)

        if not with_grad:
            return terms.total(), None

        g_mean = resid_y / sigma2_y
        terms.add_grad("mu", np.asarray(g_mean.sum()))
        terms.add_grad("cov", self._z.T @ g_mean)
        terms.add_grad("sigma2_y", np.asarray(-0.5 * n + 0.5 * ss / sigma2_y))
        g_theta = np.einsum("i,iht->ht", g_mean, eta)
        terms.add_grad("beta", omega @ g_theta.T)
        terms.add_grad("omega", beta @ g_theta)
        g_eta += g_mean[:, None, None] * theta[None, :, :]
        g_eta += g_mean[:, None, None] * (
            np.einsum("hg,igs,ts->iht", b_mat, eta, w_mat, optimize=True) + bt_eta_w
        )
        terms.add_grad("B", np.einsum("i,iht,ts,igs->hg", g_mean, eta, w_mat, eta, optimize=True))
        terms.add_grad("W", np.einsum("i,iht,hg,igs->ts", g_mean, eta, b_mat, eta, optimize=True))
        if self._sex is not None:
            g_theta_sex = np.einsum("i,iht->ht", g_mean * self._sex, eta)
            terms.add_grad("beta_int", g_theta_sex @ raw["omega_int"])
            terms.add_grad("omega_int", g_theta_sex.T @ raw["beta_int"])
            g_eta += (g_mean * self._sex)[:, None, None] * theta_sex[None, :, :]
        terms.add_grad("eta", g_eta)
        terms.add_grad("phi", np.asarray(g_phi * phi * (1.0 - phi) + (1.0 - 2.0 * phi)))

        return terms.total(), terms.flat_grad(self.layout)


class DirectPosterior:
    """Posterior of the direct (low-rank or unstructured) linear regression."""

    def __init__(self, spec: ModelSpec, data: ExposureDataset) -> None:
        """Initialize the posterior.

        Args:
            spec: Model spec with variant DIRECT
            data: Dataset without missing exposures

        """
        if spec.variant is not Variant.DIRECT:
            raise UsageError("DirectPosterior only handles the direct variant")
        if data.n_missing:
            raise UsageError("The direct model needs complete exposures; mean-impute first")
        self.spec = spec
        self.layout = build_layout(spec)
        self._y = np.asarray(data.y, dtype=float)
        self._z = np.asarray(data.z, dtype=float)
        self._x = np.asarray(data.x, dtype=float)

    @property
    def dim(self) -> int:
        return self.layout.dim

    def parameter_names(self) -> list[str]:
        return self.layout.names()

    def constrain(self, u: Vector) -> Vector:
        return self.layout.constrained_flat(u)

    def log_density(self, u: Vector) -> float:
        return self._evaluate(u, with_grad=False)[0]

    def log_density_and_grad(self, u: Vector) -> tuple[float, Vector]:
        value, grad = self._evaluate(u, with_grad=True)
        assert grad is not None
        return value, grad

    def initial_point(self, rng: np.random.Generator) -> Vector:
        return initial_point(self.spec, rng)

    def _evaluate(self, u: Vector, with_grad: bool) -> tuple[float, Vector | None]:
        hyper = self.spec.hyper
        raw = self.layout.unpack(u)
        par = self.layout.to_constrained(u)
        terms = _Terms(self.layout, with_grad)
        n = self._y.size

        for block in ("mu", "cov"):
            lp, g = _normal_term(raw[block], hyper.intercept_cov_var)
            terms.add(block, lp)
            terms.add_grad(block, g)
        coef_blocks = ("theta",) if self.spec.rank is None else ("beta", "omega")
        for block in coef_blocks:
            lp, g = _normal_term(raw[block], hyper.direct_coef_var)
            terms.add(block, lp)
            terms.add_grad(block, g)
        lp, g = _log_inv_gamma_term(raw["sigma2_y"], hyper.ig_shape, hyper.ig_rate)
        terms.add("sigma2_y", lp)
        terms.add_grad("sigma2_y", g)

        theta = direct_theta(raw)
        mean = float(raw["mu"]) + self._z @ raw["cov"] + np.einsum("jt,ijt->i", theta, self._x)
        sigma2_y = float(par["sigma2_y"])
        resid = self._y - mean
        ss = float(resid @ resid)
        terms.add("y", -0.5 * n * (LOG_2PI + float(raw["sigma2_y"])) - 0.5 * ss / sigma2_y)
        if not with_grad:
            return terms.total(), None

        g_mean = resid / sigma2_y
        terms.add_grad("mu", np.asarray(g_mean.sum()))
        terms.add_grad("cov", self._z.T @ g_mean)
        terms.add_grad("sigma2_y", np.asarray(-0.5 * n + 0.5 * ss / sigma2_y))
        g_theta = np.einsum("i,ijt->jt", g_mean, self._x)
        if self.spec.rank is None:
            terms.add_grad("theta", g_theta)
        else:
            terms.add_grad("beta", raw["omega"] @ g_theta.T)
            terms.add_grad("omega", raw["beta"] @ g_theta)
        return terms.total(), terms.flat_grad(self.layout)


def direct_theta(view: ParamView) -> NDArray[np.float64]:
    """Return the (p, T) coefficient matrix of a direct-model parameter view."""
    if "theta" in view:
        return np.asarray(view["theta"])
    return view["beta"].T @ view["omega"]


def main_theta(view: ParamView) -> NDArray[np.float64]:
    """Return theta of the joint model as a (k, T) matrix, sum_l beta_l omega_l'."""
    return view["beta"].T @ view["omega"]


def make_posterior(spec: ModelSpec, data: ExposureDataset) -> LowFRPosterior | DirectPosterior:
    """Instantiate the posterior class matching the spec's variant."""
    if spec.variant is Variant.DIRECT:
        return DirectPosterior(spec, data)
    return LowFRPosterior(spec, data)


def log_posterior(spec: ModelSpec, data: ExposureDataset, u: Vector) -> float:
    """Log joint density at unconstrained point ``u``.

    Raises:
        LayoutError: If ``u`` does not match the layout
        EvaluationError: If the result is not finite; ``.block`` names the culprit

    """
    return make_posterior(spec, data).log_density(u)


def grad_log_posterior(spec: ModelSpec, data: ExposureDataset, u: Vector) -> Vector:
    """Analytic gradient of :func:`log_posterior` with respect to ``u``."""
    return make_posterior(spec, data).log_density_and_grad(u)[1]


def initial_point(spec: ModelSpec, rng: np.random.Generator) -> Vector:
    """Sampler starting point.

    Every unconstrained slot is Uniform(-1, 1) except the latent factors
    (zero) and the log-variances (zero, i.e. unit variances).
    """
    layout = build_layout(spec)
    u = rng.uniform(-1.0, 1.0, size=layout.dim)
    for name in ("eta", "sigma2", "sigma2_y"):
        if name in layout:
            u[layout[name].slice] = 0.0
    return u


def prior_sample(
    spec: ModelSpec,
    seed: int | np.random.SeedSequence,
    size: int | None = None,
    fixed: dict[str, float] | None = None,
) -> Vector:
    """Draw unconstrained parameter vectors from the full prior.

    Args:
        spec: Model spec
        seed: Seed of the draw; equal seeds give identical draws
        size: Number of draws; ``None`` returns a single vector
        fixed: Constrained values pinned instead of drawn (e.g. ``{"a1": 3.0}``)

    Returns:
        Array of shape (dim,) or (size, dim)

    """
    rng = np.random.default_rng(seed)
    fixed = fixed or {}
    layout = build_layout(spec)
    hyper = spec.hyper
    shape = () if size is None else (size,)
    view: ParamView = {}

    def draw(name: str, generator) -> NDArray[np.float64]:
        value = (
            np.full(shape + layout[name].shape, fixed[name], dtype=float)
            if name in fixed
            else np.asarray(generator(), dtype=float).reshape(shape + layout[name].shape)
        )
        view[name] = value
        return value

    def gamma(block: str, a, rate: float = 1.0):
        return draw(block, lambda: rng.gamma(a, 1.0 / rate, size=shape + layout[block].shape))

    def normal(block: str, var):
        return draw(block, lambda: rng.normal(size=shape + layout[block].shape) * np.sqrt(var))

    normal("mu", hyper.intercept_cov_var)
    normal("cov", hyper.intercept_cov_var)
    if spec.variant is Variant.DIRECT:
        for block in ("theta",) if spec.rank is None else ("beta", "omega"):
            normal(block, hyper.direct_coef_var)
    else:
        a1 = gamma("a1", hyper.a_shape, hyper.a_rate)
        a2 = gamma("a2", hyper.a_shape, hyper.a_rate)
        h = spec.H1
        a_by_level = np.stack([a1] + [a2] * (h - 1), axis=-1)
        delta = draw("delta", lambda: rng.gamma(a_by_level, 1.0))
        tau = np.cumprod(delta, axis=-1)
        xi_beta = gamma("xi_beta", hyper.xi_shape, hyper.xi_rate)
        xi_omega = gamma("xi_omega", hyper.xi_shape, hyper.xi_rate)
        normal("beta", 1.0 / (xi_beta * tau[..., None]))
        normal("omega", 1.0 / (xi_omega * tau[..., None]))

        a_int = gamma("a_int", hyper.a_shape, hyper.a_rate)
        delta_int = draw("delta_int", lambda: rng.gamma(a_int, 1.0))
        xi_b = gamma("xi_B", hyper.xi_shape, hyper.xi_rate)
        xi_w = gamma("xi_W", hyper.xi_shape, hyper.xi_rate)
        normal("B", 1.0 / (xi_b * delta_int[..., None, None]))
        normal("W", 1.0 / (xi_w * delta_int[..., None, None]))

        lam = normal("Lambda", hyper.loading_var)
        sigma2 = draw(
            "sigma2",
            lambda: 1.0 / rng.gamma(hyper.ig_shape, 1.0 / hyper.ig_rate, size=shape + (spec.p,)),
        )
        phi = draw("phi", lambda: rng.uniform(size=shape))

        # eta_t = sqrt(1 - phi) z_t + sqrt(phi) w has compound-symmetric covariance
        def cs_noise(rows: int, cols: int) -> NDArray[np.float64]:
            ph = phi.reshape(shape + (1, 1, 1))
            own = rng.normal(size=shape + (spec.n, rows, cols))
            common = rng.normal(size=shape + (spec.n, rows, 1))
            return np.sqrt(1.0 - ph) * own + np.sqrt(ph) * common

        eta = draw("eta", lambda: cs_noise(spec.k, spec.T))
        noise = cs_noise(spec.p, spec.T) * np.sqrt(sigma2)[..., None, :, None]
        x_full = np.einsum("...jh,...iht->...ijt", lam, eta) + noise
        # the first n_missing cells in row-major order stand in for masked cells
        draw("x_missing", lambda: x_full.reshape(shape + (-1,))[..., : spec.n_missing])

        if spec.variant is Variant.LOWFR_SEX_INT:
            tau_sex = gamma("tau_sex", hyper.sex_tau_shape)
            xi_bi = gamma("xi_beta_int", hyper.xi_shape, hyper.xi_rate)
            xi_oi = gamma("xi_omega_int", hyper.xi_shape, hyper.xi_rate)
            normal("beta_int", 1.0 / (xi_bi * tau_sex[..., None]))
            normal("omega_int", 1.0 / (xi_oi * tau_sex[..., None]))

    view["sigma2_y"] = np.full(shape, fixed["sigma2_y"]) if "sigma2_y" in fixed else (
        1.0 / rng.gamma(hyper.ig_shape, 1.0 / hyper.ig_rate, size=shape)
    )

    if size is None:
        return layout.to_unconstrained(view)
    return np.stack(
        [
            layout.to_unconstrained({name: value[i] for name, value in view.items()})
            for i in range(size)
        ]
    )


def constrained_view(spec: ModelSpec, u: Vector) -> ParamView:
    """Shortcut for ``build_layout(spec).to_constrained(u)``."""
    return build_layout(spec).to_constrained(u)
