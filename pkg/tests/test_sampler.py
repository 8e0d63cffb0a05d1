"""Tests for the NUTS kernel, warmup adaptation and draw containers."""

import math

import numpy as np
import pytest

from lowfr.errors import FitFailure, InitializationError, UsageError
from lowfr.sampler import (
    STAT_NAMES,
    ChainState,
    DualAveraging,
    PosteriorDraws,
    SamplerConfig,
    WelfordVariance,
    _Point,
    chain_rng,
    find_initial_stepsize,
    hamiltonian,
    leapfrog,
    nuts_draw,
    run_chain,
    warmup_windows,
)


def test_config_validation():
    """Test that invalid sampler settings are rejected."""
    for kwargs in (
        {"chains": 0},
        {"warmup": 0},
        {"samples": 0},
        {"target_accept": 1.0},
        {"max_treedepth": 0},
        {"init_stepsize": 0.0},
    ):
        with pytest.raises(UsageError):
            SamplerConfig(**kwargs)


def test_warmup_windows_default():
    """Test the doubling windows of a 1000-iteration warmup."""
    assert warmup_windows(1000) == [(75, 100), (100, 150), (150, 250), (250, 450), (450, 950)]


def test_warmup_windows_short():
    """Test the shortened buffers and the no-adaptation case."""
    assert warmup_windows(10) == []
    windows = warmup_windows(100)
    assert windows[0][0] == 15
    assert windows[-1][1] == 90
    assert all(a[1] == b[0] for a, b in zip(windows, windows[1:]))


def test_welford_variance(rng):
    """Test the running variance and its regularization."""
    values = rng.normal(size=(50, 3)) * np.array([1.0, 2.0, 0.5])
    variance = WelfordVariance(3)
    for row in values:
        variance.add(row)
    np.testing.assert_allclose(variance.mean, values.mean(axis=0))
    expected = (50 / 55) * values.var(axis=0, ddof=1) + 1e-3 * 5 / 55
    np.testing.assert_allclose(variance.regularized(), expected)


def test_dual_averaging_direction():
    """Test that low acceptance shrinks and high acceptance grows the step size."""
    low = DualAveraging(0.8)
    low.restart(1.0)
    for _ in range(30):
        small = low.update(0.1)
    high = DualAveraging(0.8)
    high.restart(1.0)
    for _ in range(30):
        large = high.update(1.0)
    assert small < 1.0 < large
    assert low.final() < high.final()


def test_chain_state_rejects_non_finite(gaussian_target):
    """Test that a start point with a non-finite density is refused."""

    def broken(u):
        return math.nan, np.zeros_like(u)

    with pytest.raises(InitializationError):
        ChainState.at(broken, np.zeros(2))
    state = ChainState.at(gaussian_target.log_density_and_grad, np.zeros(2))
    assert state.logp == pytest.approx(-0.5 * (4.0 + 1.0))


def test_nuts_draw_stats(gaussian_target):
    """Test the statistics of a single transition."""
    rng = np.random.default_rng(0)
    state = ChainState.at(gaussian_target.log_density_and_grad, np.array([1.0, -2.0]))
    new, stats = nuts_draw(gaussian_target.log_density_and_grad, state, 0.3, np.ones(2), rng, 4)
    assert 1 <= stats.treedepth <= 4
    assert stats.n_leapfrog >= 1
    assert 0.0 <= stats.accept_stat <= 1.0
    assert not stats.divergent
    assert new.q.shape == (2,)


def test_nuts_divergence_on_huge_step(gaussian_target):
    """Test that an absurd step size is flagged as divergent."""
    rng = np.random.default_rng(1)
    state = ChainState.at(gaussian_target.log_density_and_grad, np.array([1.0, -2.0]))
    new, stats = nuts_draw(gaussian_target.log_density_and_grad, state, 1e4, np.ones(2), rng)
    assert stats.divergent
    np.testing.assert_allclose(new.q, state.q)


def test_find_initial_stepsize(gaussian_target):
    """Test that the heuristic lands within the scale of the target."""
    state = ChainState.at(gaussian_target.log_density_and_grad, np.array([1.0, -2.0]))
    stepsize = find_initial_stepsize(
        gaussian_target.log_density_and_grad, state, 1.0, np.ones(2), np.random.default_rng(2)
    )
    assert 0.01 < stepsize < 10.0


def test_chain_rng_streams():
    """Test that chain streams depend on seed and chain only."""
    assert chain_rng(5, 1).uniform() == chain_rng(5, 1).uniform()
    assert chain_rng(5, 1).uniform() != chain_rng(5, 2).uniform()


def test_run_chain_shapes(gaussian_target, tiny_sampler):
    """Test shapes and determinism of one chain."""
    first = run_chain(gaussian_target, tiny_sampler, 0)
    again = run_chain(gaussian_target, tiny_sampler, 0)
    assert first.draws.shape == (20, 2)
    assert set(first.stats) == set(STAT_NAMES)
    np.testing.assert_array_equal(first.draws, again.draws)
    assert first.stepsize > 0
    assert first.inv_mass.shape == (2,)


def test_run_chain_all_divergent():
    """Test that a chain whose warmup always diverges fails."""

    class Cliff:
        dim = 1

        def log_density_and_grad(self, u):
            if np.any(u != 0.0):
                return -1e12, np.array([0.0])
            return 0.0, np.array([0.0])

        def initial_point(self, rng):
            return np.zeros(1)

        def constrain(self, u):
            return u

        def parameter_names(self):
            return ["x"]

    config = SamplerConfig(chains=1, warmup=5, samples=5, seed=0, max_treedepth=2)
    with pytest.raises(FitFailure):
        run_chain(Cliff(), config, 0)


@pytest.mark.slow
def test_gaussian_calibration(gaussian_target):
    """Test posterior means and variances on an independent normal target."""
    config = SamplerConfig(chains=1, warmup=500, samples=2000, seed=11)
    result = run_chain(gaussian_target, config, 0)
    np.testing.assert_allclose(result.draws.mean(axis=0), [1.0, -2.0], atol=0.2)
    np.testing.assert_allclose(result.draws.std(axis=0), [0.5, 2.0], rtol=0.15)
    assert result.divergences == 0


def test_posterior_draws_access():
    """Test parameter, block and flat access."""
    array = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3)
    draws = PosteriorDraws(["mu", "theta[1]", "theta[2]"], array)
    assert (draws.chains, draws.samples) == (2, 3)
    np.testing.assert_array_equal(draws.param("mu"), array[:, :, 0])
    names, block = draws.block("theta")
    assert names == ["theta[1]", "theta[2]"]
    assert block.shape == (2, 3, 2)
    assert draws.flat().shape == (6, 3)
    assert draws.divergences() == 0
    with pytest.raises(UsageError):
        draws.param("sigma")
    with pytest.raises(UsageError):
        PosteriorDraws(["mu"], array)


def test_posterior_draws_frame_round_trip():
    """Test the long draws table."""
    array = np.random.default_rng(0).normal(size=(2, 4, 2))
    draws = PosteriorDraws(["a", "b[1]"], array)
    frame = draws.to_frame()
    assert list(frame.columns) == ["chain", "draw", "a", "b[1]"]
    assert frame["chain"].tolist() == [1, 1, 1, 1, 2, 2, 2, 2]
    restored = PosteriorDraws.from_frame(frame.sample(frac=1.0, random_state=3))
    np.testing.assert_allclose(restored.array, array)


def test_from_chains_warns_on_divergences(gaussian_target, tiny_sampler):
    """Test ordering by chain index and the divergence warning."""
    results = [run_chain(gaussian_target, tiny_sampler, c) for c in (1, 0)]
    results[0].stats["divergent"][:] = 1.0
    draws = PosteriorDraws.from_chains(gaussian_target.parameter_names(), results)
    np.testing.assert_array_equal(draws.array[0], results[1].draws)
    assert draws.divergences() == 20
    assert draws.warnings


def _integrate(target, start, stepsize, steps, inv_mass):
    point = start
    for _ in range(steps):
        point = leapfrog(target, point, stepsize, inv_mass)
    return point


def _start(target, q, p):
    logp, grad = target(q)
    return _Point(np.asarray(q, dtype=float), np.asarray(p, dtype=float), logp, grad)


def test_leapfrog_is_reversible(gaussian_target):
    """Test that negating the momentum retraces the trajectory to its start."""
    target = gaussian_target.log_density_and_grad
    inv_mass = np.array([1.0, 0.5])
    start = _start(target, [0.3, 1.5], [-0.8, 0.4])
    forward = _integrate(target, start, 0.1, 25, inv_mass)
    assert not np.allclose(forward.q, start.q)
    reverse = _Point(forward.q, -forward.p, forward.logp, forward.grad)
    back = _integrate(target, reverse, 0.1, 25, inv_mass)
    np.testing.assert_allclose(back.q, start.q, atol=1e-8)
    np.testing.assert_allclose(back.p, -start.p, atol=1e-8)


def test_leapfrog_energy_error_is_second_order(gaussian_target):
    """Test that halving the step size cuts the energy error about fourfold."""
    target = gaussian_target.log_density_and_grad
    inv_mass = np.ones(2)
    gen = np.random.default_rng(4)
    starts = [_start(target, gen.normal(size=2), gen.normal(size=2)) for _ in range(20)]
    errors = []
    for stepsize in (0.05, 0.025):
        steps = round(1.0 / stepsize)
        errors.append(
            np.mean(
                [
                    abs(
                        hamiltonian(_integrate(target, s, stepsize, steps, inv_mass), inv_mass)
                        - hamiltonian(s, inv_mass)
                    )
                    for s in starts
                ]
            )
        )
    assert errors[0] / errors[1] == pytest.approx(4.0, abs=0.5)


def test_flat_target_has_no_drift():
    """Test that transitions on a flat density are symmetric random-walk steps."""

    def flat(u):
        return 0.0, np.zeros_like(u)

    gen = np.random.default_rng(9)
    state = ChainState.at(flat, np.zeros(1))
    positions = np.empty(1000)
    for it in range(positions.size):
        state, stats = nuts_draw(flat, state, 0.5, np.ones(1), gen, max_treedepth=3)
        assert not stats.divergent
        assert stats.accept_stat == pytest.approx(1.0)
        positions[it] = state.q[0]
    steps = np.diff(positions, prepend=0.0)
    assert steps.std() > 0
    assert abs(positions[-1]) < 3.0 * steps.std() * np.sqrt(positions.size)


def test_adapted_acceptance_near_target(wide_gaussian_target):
    """Test that the adapted step size yields the requested mean acceptance."""
    config = SamplerConfig(chains=1, warmup=500, samples=1000, seed=4)
    result = run_chain(wide_gaussian_target, config, 0)
    assert result.stats["accept_stat"].mean() == pytest.approx(config.target_accept, abs=0.1)
    assert result.divergences == 0
