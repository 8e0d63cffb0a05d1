"""Tests for the induced quadratic regression."""

import numpy as np
import pytest

from lowfr.errors import DimensionError, DomainError, UsageError
from lowfr.induced import (
    Group,
    InducedDraws,
    conditional_eta,
    conditional_eta_dense,
    conditional_eta_general,
    conditional_factors,
    group_induced,
    induced_coefficients,
    induced_dense,
    induced_draws,
)
from lowfr.linalg import CompoundSymmetric, kron
from lowfr.model import ModelSpec, Variant, build_layout, main_theta, prior_sample
from lowfr.sampler import PosteriorDraws


@pytest.fixture
def spec():
    """Return a small factor-model spec."""
    return ModelSpec(n=4, p=4, T=3, k=2)


@pytest.fixture
def sex_spec():
    """Return a small sex-interaction spec."""
    return ModelSpec(n=4, p=3, T=2, k=2, c=1, variant=Variant.LOWFR_SEX_INT, sex_index=0)


def _view(spec, seed):
    layout = build_layout(spec)
    return layout.to_constrained(prior_sample(spec, seed))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_factored_matches_dense(spec, seed):
    """Test the Kronecker shortcuts against explicit products."""
    view = _view(spec, seed)
    fast = induced_coefficients(view, spec)
    slow = induced_dense(view, spec)
    assert fast.alpha0 == pytest.approx(slow.alpha0, abs=1e-10)
    np.testing.assert_allclose(fast.alpha, slow.alpha, atol=1e-10)
    np.testing.assert_allclose(fast.gamma, slow.gamma, atol=1e-10)
    np.testing.assert_allclose(fast.gamma, fast.gamma.T)
    assert fast.alpha.shape == (12,)


def test_conditional_maps_agree(rng):
    """Test the three routes to the conditional distribution of the factors."""
    lam = rng.normal(size=(4, 2))
    sigma2 = rng.uniform(0.5, 2.0, size=4)
    phi = CompoundSymmetric(3, 0.4)
    fast = conditional_eta(lam, sigma2, phi)
    dense = conditional_eta_dense(lam, sigma2, phi)
    general = conditional_eta_general(
        lam, kron(np.diag(sigma2), phi.dense()), kron(np.eye(2), phi.dense())
    )
    for other in (dense, general):
        np.testing.assert_allclose(fast.A, other.A, atol=1e-10)
        np.testing.assert_allclose(fast.V, other.V, atol=1e-10)
    assert fast.a_tilde.shape == (2, 4)


def test_conditional_general_dimension_errors(rng):
    """Test non-conforming covariances."""
    lam = rng.normal(size=(3, 2))
    with pytest.raises(DimensionError):
        conditional_eta_general(lam, np.eye(7), np.eye(4))
    with pytest.raises(DimensionError):
        conditional_eta_general(lam, np.eye(6), np.eye(5))


def test_conditional_factor_errors(rng):
    """Test invalid residual variances."""
    lam = rng.normal(size=(3, 2))
    with pytest.raises(DomainError):
        conditional_factors(lam, [1.0, -1.0, 1.0])
    with pytest.raises(DimensionError):
        conditional_factors(lam, [1.0, 1.0])


def test_mean_is_conditional_expectation(spec, rng):
    """Test E[y | x] against the expectation over eta | x."""
    view = _view(spec, 4)
    coefs = induced_coefficients(view, spec)
    phi = CompoundSymmetric(3, float(view["phi"]))
    cmap = conditional_eta(view["Lambda"], view["sigma2"], phi)
    omega = kron(view["B"], view["W"])
    x = rng.normal(size=12)
    eta_mean = cmap.A @ x
    expected = (
        float(view["mu"])
        + main_theta(view).ravel() @ eta_mean
        + eta_mean @ omega @ eta_mean
        + np.trace(omega @ cmap.V)
    )
    assert coefs.mean(x) == pytest.approx(expected)


def test_groups(sex_spec):
    """Test that only alpha differs between the groups."""
    view = _view(sex_spec, 9)
    reference = group_induced(view, sex_spec, Group.REFERENCE)
    flagged = group_induced(view, sex_spec, "flagged")
    a_tilde, _ = conditional_factors(view["Lambda"], view["sigma2"])
    theta = main_theta(view) + np.outer(view["beta_int"], view["omega_int"])
    np.testing.assert_allclose(flagged.alpha, (a_tilde.T @ theta).ravel())
    np.testing.assert_allclose(flagged.gamma, reference.gamma)
    assert flagged.alpha0 == reference.alpha0

    view["beta_int"] = np.zeros_like(view["beta_int"])
    np.testing.assert_allclose(
        group_induced(view, sex_spec, Group.FLAGGED).alpha,
        group_induced(view, sex_spec, Group.REFERENCE).alpha,
    )


def test_variant_errors(spec):
    """Test that groups and direct fits are rejected."""
    view = _view(spec, 0)
    with pytest.raises(UsageError):
        group_induced(view, spec, Group.FLAGGED)
    direct = ModelSpec(n=4, p=4, T=3, variant=Variant.DIRECT)
    with pytest.raises(UsageError):
        induced_coefficients(view, direct)


def test_induced_draws(spec):
    """Test the per-draw map and the tabular form."""
    layout = build_layout(spec)
    flat = np.stack([layout.constrained_flat(u) for u in prior_sample(spec, 5, size=6)])
    draws = PosteriorDraws(layout.names(), flat.reshape(2, 3, -1))
    labels = [f"e{j}_t{t}" for j in range(1, 5) for t in range(1, 4)]
    result = induced_draws(draws, spec, labels)
    assert len(result) == 6
    expected = induced_coefficients(layout.unflatten(flat[4]), spec)
    np.testing.assert_allclose(result.draw(4).alpha, expected.alpha)
    assert result.index("e2_t1") == 3
    with pytest.raises(UsageError):
        result.index("e9_t1")

    frame = result.to_frame()
    assert list(frame.columns[:3]) == ["draw", "alpha0", "alpha[e1_t1]"]
    assert "gamma[e1_t1,e4_t3]" in frame.columns
    assert "gamma[e4_t3,e1_t1]" not in frame.columns
    restored = InducedDraws.from_frame(frame)
    np.testing.assert_allclose(restored.gamma, result.gamma)
    assert restored.labels == labels


def test_induced_draws_needs_full_vector(spec):
    """Test that a partial draw table is rejected."""
    draws = PosteriorDraws(["mu"], np.zeros((1, 4, 1)))
    with pytest.raises(UsageError):
        induced_draws(draws, spec, ["a"])


def test_stack_errors():
    """Test empty stacks and mismatched shapes."""
    with pytest.raises(UsageError):
        InducedDraws.stack(["a"], [])
    with pytest.raises(DimensionError):
        InducedDraws(["a", "b"], np.zeros(2), np.zeros((2, 1)), np.zeros((2, 2, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_mean_matches_monte_carlo(spec, seed):
    """Test the induced regression against simulated outcomes given a fixed exposure."""
    view = _view(spec, seed)
    coefs = induced_coefficients(view, spec)
    rng = np.random.default_rng(100 + seed)
    x0 = rng.normal(size=12)
    cmap = conditional_eta_dense(
        view["Lambda"], view["sigma2"], CompoundSymmetric(3, float(view["phi"]))
    )
    eta = rng.multivariate_normal(cmap.A @ x0, cmap.V, size=200_000)
    omega = kron(view["B"], view["W"])
    values = (
        float(view["mu"])
        + eta @ main_theta(view).ravel()
        + np.einsum("ni,ij,nj->n", eta, omega, eta)
    )
    tolerance = 4 * values.std() / np.sqrt(values.size)
    assert abs(values.mean() - coefs.mean(x0)) < tolerance
    assert coefs.mean(x0) == pytest.approx(
        coefs.alpha0 + coefs.alpha @ x0 + x0 @ coefs.gamma @ x0
    )
