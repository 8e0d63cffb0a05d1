"""Induced regression of the outcome on the exposures.

Integrating the latent factors out of the joint model gives a quadratic
regression E[y | x] = alpha0 + alpha'x + x' Gamma x. With
eta | x ~ N(A x, V), A = V (Lambda' Sigma^-1 kron Phi^-1) and
V = (Lambda' Sigma^-1 Lambda + I)^-1 kron Phi, the coefficients are

    alpha  = A' theta
    Gamma  = A' Omega A
    alpha0 = mu + tr(Omega V)

For the Kronecker model these factor: A = A~ kron I_T with
A~ = V~ Lambda' Sigma^-1, so alpha = vec((beta A~)' omega) and
Gamma = (A~' B A~) kron W, alpha0 = mu + tr(B V~) tr(W Phi).

Exposure coordinates are ordered exposure-major, time-minor (index j*T + t),
factor coordinates factor-major (h*T + t).
"""

from __future__ import annotations

from dataclasses import dataclass
import enum
import logging

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd

from .errors import DimensionError, DomainError, UsageError
from .layout import ParamView
from .linalg import (
    CompoundSymmetric,
    as_matrix,
    gaussian_conditional,
    kron,
    kron_trace_product,
    spd_inverse,
    symmetrize,
)
from .model import ModelSpec, Variant, build_layout, main_theta
from .sampler import PosteriorDraws

_LOGGER = logging.getLogger(__name__)


class Group(enum.StrEnum):
    """Groups of the sex-interaction variant."""

    REFERENCE = "reference"
    FLAGGED = "flagged"


@dataclass(frozen=True)
class ConditionalMap:
    """eta | x ~ N(A x, V).

    ``a_tilde`` and ``v_tilde`` are the k x p and k x k factors of the
    Kronecker case (None for the general path).
    """

    A: NDArray[np.float64]  # pylint: disable=invalid-name
    V: NDArray[np.float64]  # pylint: disable=invalid-name
    a_tilde: NDArray[np.float64] | None = None
    v_tilde: NDArray[np.float64] | None = None


@dataclass(frozen=True)
class InducedCoefficients:
    """alpha0 + alpha'x + x' gamma x, with symmetric gamma."""

    alpha0: float
    alpha: NDArray[np.float64]
    gamma: NDArray[np.float64]

    def mean(self, x: ArrayLike) -> float:
        """E[y | x] for a flat exposure vector (covariate terms excluded)."""
        vec = np.asarray(x, dtype=float).ravel()
        return float(self.alpha0 + self.alpha @ vec + vec @ self.gamma @ vec)


def _check_variances(sigma2: ArrayLike, p: int) -> NDArray[np.float64]:
    var = np.asarray(sigma2, dtype=float).ravel()
    if var.size != p:
        raise DimensionError(f"Need {p} residual variances, got {var.size}")
    if np.any(var <= 0):
        raise DomainError("Residual variances must be positive")
    return var


def conditional_factors(
    lam: ArrayLike, sigma2: ArrayLike
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Return (A~, V~) = (V~ Lambda' Sigma^-1, (Lambda' Sigma^-1 Lambda + I)^-1)."""
    lam_mat = as_matrix(lam, "Lambda")
    var = _check_variances(sigma2, lam_mat.shape[0])
    scaled = lam_mat.T / var
    precision = scaled @ lam_mat + np.eye(lam_mat.shape[1])
    v_tilde = spd_inverse(precision, "Lambda' Sigma^-1 Lambda + I")
    return v_tilde @ scaled, v_tilde


def conditional_eta(lam: ArrayLike, sigma2: ArrayLike, phi: CompoundSymmetric) -> ConditionalMap:
    """Conditional distribution of the latent factors given the exposures.

    Args:
        lam: p x k loadings
        sigma2: p residual variances
        phi: Temporal correlation

    Returns:
        Map with A = A~ kron I_T and V = V~ kron Phi

    Raises:
        DomainError: If a variance is not positive

    """
    a_tilde, v_tilde = conditional_factors(lam, sigma2)
    return ConditionalMap(
        A=kron(a_tilde, np.eye(phi.dim)),
        V=kron(v_tilde, phi.dense()),
        a_tilde=a_tilde,
        v_tilde=v_tilde,
    )


def conditional_eta_dense(
    lam: ArrayLike, sigma2: ArrayLike, phi: CompoundSymmetric
) -> ConditionalMap:
    """Same map obtained by conditioning the joint Gaussian of (eta, x) directly."""
    lam_mat = as_matrix(lam, "Lambda")
    var = _check_variances(sigma2, lam_mat.shape[0])
    phi_mat = phi.dense()
    k = lam_mat.shape[1]
    cov_eta = kron(np.eye(k), phi_mat)
    cov_eta_x = kron(lam_mat.T, phi_mat)
    cov_x = kron(lam_mat @ lam_mat.T + np.diag(var), phi_mat)
    gain, schur = gaussian_conditional(cov_eta, cov_eta_x, cov_x)
    return ConditionalMap(A=gain, V=schur)


def conditional_eta_general(
    lam: ArrayLike, psi_eps: ArrayLike, psi_eta: ArrayLike
) -> ConditionalMap:
    """Conditional map without Kronecker assumptions on the covariances.

    Args:
        lam: p x k loadings
        psi_eps: pT x pT residual covariance
        psi_eta: kT x kT latent-factor covariance

    Raises:
        DimensionError: If the sizes do not conform
        DomainError: If a covariance is not positive definite

    """
    lam_mat = as_matrix(lam, "Lambda")
    eps = as_matrix(psi_eps, "Psi_eps")
    eta = as_matrix(psi_eta, "Psi_eta")
    p, k = lam_mat.shape
    if eps.shape[0] % p or eps.shape[0] != eps.shape[1]:
        raise DimensionError(f"Residual covariance {eps.shape} does not match p = {p}")
    t = eps.shape[0] // p
    if eta.shape != (k * t, k * t):
        raise DimensionError(f"Latent covariance {eta.shape} does not match k T = {k * t}")
    load = kron(lam_mat, np.eye(t))
    eps_inv = spd_inverse(eps, "Psi_eps")
    v_mat = spd_inverse(load.T @ eps_inv @ load + spd_inverse(eta, "Psi_eta"), "V^-1")
    return ConditionalMap(A=v_mat @ load.T @ eps_inv, V=v_mat)


def _check_lowfr(spec: ModelSpec) -> None:
    if spec.variant is Variant.DIRECT:
        raise UsageError("Induced coefficients need a factor-model variant")


def induced_coefficients(view: ParamView, spec: ModelSpec) -> InducedCoefficients:
    """Induced coefficients of one constrained draw, through the factored formulas.

    Raises:
        UsageError: For the direct variant

    """
    _check_lowfr(spec)
    a_tilde, v_tilde = conditional_factors(view["Lambda"], view["sigma2"])
    phi = CompoundSymmetric(spec.T, float(view["phi"]))
    b_mat, w_mat = view["B"], view["W"]
    alpha = (a_tilde.T @ main_theta(view)).ravel()
    gamma = symmetrize(kron(a_tilde.T @ b_mat @ a_tilde, w_mat))
    alpha0 = float(view["mu"]) + kron_trace_product(b_mat, v_tilde, w_mat, phi.dense())
    return InducedCoefficients(alpha0, alpha, gamma)


def induced_dense(view: ParamView, spec: ModelSpec) -> InducedCoefficients:
    """Induced coefficients assembled with explicit Kronecker products."""
    _check_lowfr(spec)
    cmap = conditional_eta_dense(
        view["Lambda"], view["sigma2"], CompoundSymmetric(spec.T, float(view["phi"]))
    )
    theta = main_theta(view).ravel()
    omega = kron(view["B"], view["W"])
    alpha0 = float(view["mu"]) + float(np.trace(omega @ cmap.V))
    return InducedCoefficients(alpha0, cmap.A.T @ theta, symmetrize(cmap.A.T @ omega @ cmap.A))


def group_induced(view: ParamView, spec: ModelSpec, group: Group | str) -> InducedCoefficients:
    """Induced coefficients of one group of the sex-interaction variant.

    The flagged group adds vec(omega_int beta_int') to theta; Gamma and alpha0
    are shared.
    """
    if spec.variant is not Variant.LOWFR_SEX_INT:
        raise UsageError("Group coefficients need the sex-interaction variant")
    base = induced_coefficients(view, spec)
    if Group(group) is Group.REFERENCE:
        return base
    a_tilde, _ = conditional_factors(view["Lambda"], view["sigma2"])
    shift = np.outer(view["beta_int"] @ a_tilde, view["omega_int"]).ravel()
    return InducedCoefficients(base.alpha0, base.alpha + shift, base.gamma)


@dataclass
class InducedDraws:
    """Induced coefficients of every retained draw."""

    labels: list[str]
    alpha0: NDArray[np.float64]
    alpha: NDArray[np.float64]
    gamma: NDArray[np.float64]

    def __post_init__(self) -> None:
        """Check shapes."""
        m = len(self.labels)
        n = self.alpha0.shape[0]
        if self.alpha.shape != (n, m) or self.gamma.shape != (n, m, m):
            raise DimensionError("Induced draw arrays do not match the labels")

    def __len__(self) -> int:
        return self.alpha0.shape[0]

    def draw(self, index: int) -> InducedCoefficients:
        return InducedCoefficients(float(self.alpha0[index]), self.alpha[index], self.gamma[index])

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError as err:
            raise UsageError(f"Unknown exposure coordinate {label!r}") from err

    @classmethod
    def stack(cls, labels: list[str], coefs: list[InducedCoefficients]) -> InducedDraws:
        if not coefs:
            raise UsageError("No draws to stack")
        return cls(
            labels,
            np.array([c.alpha0 for c in coefs]),
            np.stack([c.alpha for c in coefs]),
            np.stack([c.gamma for c in coefs]),
        )

    def to_frame(self) -> pd.DataFrame:
        """One row per draw: alpha0, alpha[...] then the upper triangle of Gamma."""
        m = len(self.labels)
        rows, cols = np.triu_indices(m)
        data = {"alpha0": self.alpha0}
        data.update({f"alpha[{label}]": self.alpha[:, i] for i, label in enumerate(self.labels)})
        data.update(
            {
                f"gamma[{self.labels[a]},{self.labels[b]}]": self.gamma[:, a, b]
                for a, b in zip(rows, cols)
            }
        )
        frame = pd.DataFrame(data)
        frame.insert(0, "draw", np.arange(1, len(self) + 1))
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> InducedDraws:
        """Inverse of :meth:`to_frame`."""
        labels = [col[6:-1] for col in frame.columns if col.startswith("alpha[")]
        m = len(labels)
        alpha = frame[[f"alpha[{label}]" for label in labels]].to_numpy(dtype=float)
        gamma = np.zeros((len(frame), m, m))
        for a in range(m):
            for b in range(a, m):
                values = frame[f"gamma[{labels[a]},{labels[b]}]"].to_numpy(dtype=float)
                gamma[:, a, b] = values
                gamma[:, b, a] = values
        return cls(labels, frame["alpha0"].to_numpy(dtype=float), alpha, gamma)


def induced_draws(
    draws: PosteriorDraws,
    spec: ModelSpec,
    labels: list[str],
    group: Group | str | None = None,
) -> InducedDraws:
    """Apply the induced-coefficient map to every retained draw."""
    _check_lowfr(spec)
    layout = build_layout(spec)
    block_names = [b.name for b in layout.blocks]
    needed = [name for name in draws.names if name.split("[", 1)[0] in block_names]
    if len(needed) != layout.dim:
        raise UsageError("Draws do not carry the full parameter vector of the model")
    coefs = []
    for flat in draws.flat():
        view = layout.unflatten(flat)
        coefs.append(
            induced_coefficients(view, spec) if group is None else group_induced(view, spec, group)
        )
    _LOGGER.debug("Computed induced coefficients for %d draws", len(coefs))
    return InducedDraws.stack(labels, coefs)
