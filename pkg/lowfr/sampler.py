"""No-U-Turn sampler with windowed warmup.

The kernel is the multinomial variant of NUTS: the trajectory is doubled in
a random direction until the generalized U-turn criterion fails (checked on
every subtree and on the two merged sub-trajectories), the maximum depth is
hit or the energy error exceeds the divergence threshold. The proposal is drawn
from the trajectory with weights exp(-H), progressively biased towards the
newest subtree.

Warmup follows the usual three phases: a fast initial buffer that only tunes
the step size, a series of doubling slow windows that estimate a diagonal
inverse metric, and a fast terminal buffer. After every slow window the step
size heuristic is re-run and dual averaging restarts.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
import logging
import math
from typing import Protocol

import numpy as np
from numpy.typing import NDArray
import pandas as pd

from .const import (
    DA_GAMMA,
    DA_KAPPA,
    DA_T0,
    DEFAULT_CHAINS,
    DEFAULT_INIT_STEPSIZE,
    DEFAULT_MAX_TREEDEPTH,
    DEFAULT_SAMPLES,
    DEFAULT_TARGET_ACCEPT,
    DEFAULT_WARMUP,
    DIVERGENCE_THRESHOLD,
    DIVERGENCE_WARN_FRACTION,
    WARMUP_BASE_WINDOW,
    WARMUP_INIT_BUFFER,
    WARMUP_MIN_ADAPT,
    WARMUP_SHORT_INIT_FRACTION,
    WARMUP_SHORT_TERM_FRACTION,
    WARMUP_TERM_BUFFER,
)
from .errors import FitFailure, InitializationError, LowFRError, UsageError

_LOGGER = logging.getLogger(__name__)

Vector = NDArray[np.float64]
LogDensity = Callable[[Vector], tuple[float, Vector]]

MAX_INIT_ATTEMPTS = 100
STAT_NAMES = ("accept_stat", "treedepth", "n_leapfrog", "divergent", "energy", "stepsize")


class Posterior(Protocol):
    """What the sampler needs from a model."""

    @property
    def dim(self) -> int: ...

    def log_density_and_grad(self, u: Vector) -> tuple[float, Vector]: ...

    def initial_point(self, rng: np.random.Generator) -> Vector: ...

    def constrain(self, u: Vector) -> Vector: ...

    def parameter_names(self) -> list[str]: ...


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler settings."""

    chains: int = DEFAULT_CHAINS
    warmup: int = DEFAULT_WARMUP
    samples: int = DEFAULT_SAMPLES
    seed: int = 0
    target_accept: float = DEFAULT_TARGET_ACCEPT
    max_treedepth: int = DEFAULT_MAX_TREEDEPTH
    init_stepsize: float = DEFAULT_INIT_STEPSIZE

    def __post_init__(self) -> None:
        """Validate the settings."""
        if self.chains < 1:
            raise UsageError("chains must be >= 1")
        if self.warmup < 1 or self.samples < 1:
            raise UsageError("warmup and samples must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise UsageError("target_accept must lie in (0, 1)")
        if self.max_treedepth < 1:
            raise UsageError("max_treedepth must be >= 1")
        if not self.init_stepsize > 0:
            raise UsageError("init_stepsize must be positive")


@dataclass
class ChainState:
    """Position with its log density and gradient."""

    q: Vector
    logp: float
    grad: Vector

    @classmethod
    def at(cls, target: LogDensity, q: Vector) -> ChainState:
        """Evaluate the target at ``q``.

        Raises:
            InitializationError: If the density or gradient is not finite

        """
        try:
            logp, grad = target(q)
        except LowFRError as err:
            raise InitializationError(f"Log density failed at the start point: {err}") from err
        if not math.isfinite(logp) or not np.all(np.isfinite(grad)):
            raise InitializationError("Non-finite log density or gradient at the start point")
        return cls(np.array(q, dtype=float), float(logp), np.asarray(grad, dtype=float))


@dataclass(frozen=True)
class DrawStats:
    """Diagnostics of one transition."""

    accept_stat: float
    treedepth: int
    n_leapfrog: int
    divergent: bool
    energy: float
    stepsize: float


@dataclass
class _Point:
    q: Vector
    p: Vector
    logp: float
    grad: Vector


@dataclass
class _Subtree:
    valid: bool
    proposal: _Point
    log_weight: float
    rho: Vector
    p_beg: Vector
    p_end: Vector
    sharp_beg: Vector
    sharp_end: Vector


def leapfrog(
    target: LogDensity, point: _Point, stepsize: float, inv_mass: Vector
) -> _Point:
    """One leapfrog step; a failing density evaluation yields logp = -inf."""
    p_half = point.p + 0.5 * stepsize * point.grad
    q_new = point.q + stepsize * inv_mass * p_half
    try:
        logp, grad = target(q_new)
    except LowFRError:
        return _Point(q_new, p_half, -math.inf, np.full_like(q_new, np.nan))
    return _Point(q_new, p_half + 0.5 * stepsize * grad, float(logp), grad)


def hamiltonian(point: _Point, inv_mass: Vector) -> float:
    """Potential plus kinetic energy; non-finite values map to +inf."""
    energy = -point.logp + 0.5 * float(np.sum(point.p * point.p * inv_mass))
    return energy if math.isfinite(energy) else math.inf


def _no_uturn(sharp_minus: Vector, sharp_plus: Vector, rho: Vector) -> bool:
    return float(sharp_plus @ rho) > 0 and float(sharp_minus @ rho) > 0


class _TreeBuilder:
    """Recursive trajectory doubling for one transition."""

    def __init__(
        self,
        target: LogDensity,
        stepsize: float,
        inv_mass: Vector,
        h0: float,
        rng: np.random.Generator,
    ) -> None:
        self.target = target
        self.stepsize = stepsize
        self.inv_mass = inv_mass
        self.h0 = h0
        self.rng = rng
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False

    def build(self, edge: _Point, depth: int, direction: int) -> tuple[_Subtree, _Point]:
        if depth == 0:
            return self._leaf(edge, direction)
        inner, edge = self.build(edge, depth - 1, direction)
        if not inner.valid:
            return inner, edge
        outer, edge = self.build(edge, depth - 1, direction)
        if not outer.valid:
            return outer, edge

        log_weight = float(np.logaddexp(inner.log_weight, outer.log_weight))
        proposal = inner.proposal
        if self.rng.uniform() < math.exp(outer.log_weight - log_weight):
            proposal = outer.proposal
        rho = inner.rho + outer.rho
        persist = (
            _no_uturn(inner.sharp_beg, outer.sharp_end, rho)
            and _no_uturn(inner.sharp_beg, outer.sharp_beg, inner.rho + outer.p_beg)
            and _no_uturn(inner.sharp_end, outer.sharp_end, outer.rho + inner.p_end)
        )
        subtree = _Subtree(
            persist,
            proposal,
            log_weight,
            rho,
            inner.p_beg,
            outer.p_end,
            inner.sharp_beg,
            outer.sharp_end,
        )
        return subtree, edge

    def _leaf(self, edge: _Point, direction: int) -> tuple[_Subtree, _Point]:
        point = leapfrog(self.target, edge, direction * self.stepsize, self.inv_mass)
        self.n_leapfrog += 1
        energy = hamiltonian(point, self.inv_mass)
        if energy - self.h0 > DIVERGENCE_THRESHOLD:
            self.divergent = True
        log_weight = self.h0 - energy
        self.sum_metro += 1.0 if log_weight > 0 else math.exp(log_weight)
        sharp = self.inv_mass * point.p
        subtree = _Subtree(
            not self.divergent, point, log_weight, point.p.copy(), point.p, point.p, sharp, sharp
        )
        return subtree, point


def nuts_draw(
    target: LogDensity,
    state: ChainState,
    stepsize: float,
    inv_mass_diag: Vector,
    rng: np.random.Generator,
    max_treedepth: int = DEFAULT_MAX_TREEDEPTH,
) -> tuple[ChainState, DrawStats]:
    """One multinomial NUTS transition.

    Args:
        target: Callable returning (log density, gradient)
        state: Current position
        stepsize: Leapfrog step size
        inv_mass_diag: Diagonal of the inverse metric
        rng: Random generator of the chain
        max_treedepth: Maximum number of trajectory doublings

    Returns:
        The next state and the transition diagnostics

    Raises:
        InitializationError: If the gradient at ``state`` is not finite

    """
    if not math.isfinite(state.logp) or not np.all(np.isfinite(state.grad)):
        raise InitializationError("Non-finite log density or gradient at the current state")
    momentum = rng.normal(size=state.q.size) / np.sqrt(inv_mass_diag)
    start = _Point(state.q, momentum, state.logp, state.grad)
    h0 = hamiltonian(start, inv_mass_diag)
    builder = _TreeBuilder(target, stepsize, inv_mass_diag, h0, rng)

    minus = plus = start
    sharp0 = inv_mass_diag * momentum
    p_minus = p_plus = momentum
    sharp_minus = sharp_plus = sharp0
    rho = momentum.copy()
    log_sum_weight = 0.0
    sample = start
    depth = 0

    while depth < max_treedepth:
        rho_old = rho
        if rng.uniform() > 0.5:
            subtree, plus = builder.build(plus, depth, 1)
            if not subtree.valid:
                break
            persist_extra = _no_uturn(sharp_minus, subtree.sharp_beg, rho_old + subtree.p_beg) and (
                _no_uturn(sharp_plus, subtree.sharp_end, subtree.rho + p_plus)
            )
            p_plus, sharp_plus = subtree.p_end, subtree.sharp_end
        else:
            subtree, minus = builder.build(minus, depth, -1)
            if not subtree.valid:
                break
            persist_extra = _no_uturn(subtree.sharp_beg, sharp_plus, rho_old + subtree.p_beg) and (
                _no_uturn(subtree.sharp_end, sharp_minus, subtree.rho + p_minus)
            )
            p_minus, sharp_minus = subtree.p_end, subtree.sharp_end
        depth += 1

        if subtree.log_weight > log_sum_weight or rng.uniform() < math.exp(
            subtree.log_weight - log_sum_weight
        ):
            sample = subtree.proposal
        log_sum_weight = float(np.logaddexp(log_sum_weight, subtree.log_weight))
        rho = rho_old + subtree.rho
        if not (persist_extra and _no_uturn(sharp_minus, sharp_plus, rho)):
            break

    accept = builder.sum_metro / builder.n_leapfrog if builder.n_leapfrog else 0.0
    stats = DrawStats(
        accept_stat=accept,
        treedepth=depth,
        n_leapfrog=builder.n_leapfrog,
        divergent=builder.divergent,
        energy=hamiltonian(sample, inv_mass_diag),
        stepsize=stepsize,
    )
    return ChainState(sample.q, sample.logp, sample.grad), stats


def find_initial_stepsize(
    target: LogDensity,
    state: ChainState,
    stepsize: float,
    inv_mass_diag: Vector,
    rng: np.random.Generator,
) -> float:
    """Double or halve the step size until one-step acceptance crosses 0.8."""
    log_target = math.log(0.8)

    def delta_h(eps: float) -> float:
        momentum = rng.normal(size=state.q.size) / np.sqrt(inv_mass_diag)
        start = _Point(state.q, momentum, state.logp, state.grad)
        moved = leapfrog(target, start, eps, inv_mass_diag)
        return hamiltonian(start, inv_mass_diag) - hamiltonian(moved, inv_mass_diag)

    direction = 1 if delta_h(stepsize) > log_target else -1
    while True:
        accepted = delta_h(stepsize) > log_target
        if (direction == 1 and not accepted) or (direction == -1 and accepted):
            break
        stepsize = stepsize * 2.0 if direction == 1 else stepsize * 0.5
        if stepsize > 1e7 or stepsize < 1e-10:
            _LOGGER.warning("Step size search stopped at %g", stepsize)
            break
    return stepsize


@dataclass
class DualAveraging:
    """Nesterov dual averaging of log step size towards a target acceptance."""

    target: float
    mu: float = 0.0
    counter: int = 0
    s_bar: float = 0.0
    x_bar: float = 0.0

    def restart(self, stepsize: float) -> None:
        self.mu = math.log(10.0 * stepsize)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        """Feed one acceptance statistic, return the next step size."""
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + DA_T0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / DA_GAMMA
        weight = self.counter ** (-DA_KAPPA)
        self.x_bar = (1.0 - weight) * self.x_bar + weight * x
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


class WelfordVariance:
    """Running per-coordinate variance."""

    def __init__(self, dim: int) -> None:
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: Vector) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> Vector:
        """Sample variance shrunk towards 1e-3."""
        n = self.count
        var = self.m2 / (n - 1) if n > 1 else np.ones_like(self.mean)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def warmup_windows(warmup: int) -> list[tuple[int, int]]:
    """Slow adaptation windows as [start, end) iteration ranges.

    Windows double in size; a window whose successor would overrun the
    terminal buffer is stretched to the buffer's start.
    """
    if warmup < WARMUP_MIN_ADAPT:
        return []
    init_buffer, term_buffer, base = WARMUP_INIT_BUFFER, WARMUP_TERM_BUFFER, WARMUP_BASE_WINDOW
    if init_buffer + base + term_buffer > warmup:
        init_buffer = int(WARMUP_SHORT_INIT_FRACTION * warmup)
        term_buffer = int(WARMUP_SHORT_TERM_FRACTION * warmup)
        base = warmup - init_buffer - term_buffer
    last = warmup - term_buffer
    windows = []
    start, size = init_buffer, base
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


@dataclass
class ChainResult:
    """Output of one chain."""

    chain: int
    draws: NDArray[np.float64]
    stats: dict[str, NDArray[np.float64]]
    stepsize: float
    inv_mass: Vector
    warmup_divergences: int

    @property
    def divergences(self) -> int:
        return int(np.sum(self.stats["divergent"]))


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent stream of one chain, fixed by (seed, chain)."""
    return np.random.default_rng(np.random.SeedSequence([seed, chain]))


def _start_state(posterior: Posterior, rng: np.random.Generator) -> ChainState:
    error: InitializationError | None = None
    for _ in range(MAX_INIT_ATTEMPTS):
        try:
            return ChainState.at(posterior.log_density_and_grad, posterior.initial_point(rng))
        except InitializationError as err:
            error = err
    raise InitializationError(f"No valid start point after {MAX_INIT_ATTEMPTS} attempts: {error}")


# pylint: disable-next=too-many-locals
def run_chain(posterior: Posterior, config: SamplerConfig, chain: int) -> ChainResult:
    """Warm up and sample one chain.

    Raises:
        InitializationError: If no start point with a finite gradient is found
        FitFailure: If every warmup transition diverged

    """
    rng = chain_rng(config.seed, chain)
    target = posterior.log_density_and_grad
    state = _start_state(posterior, rng)
    inv_mass = np.ones(posterior.dim)
    stepsize = find_initial_stepsize(target, state, config.init_stepsize, inv_mass, rng)
    adapter = DualAveraging(config.target_accept)
    adapter.restart(stepsize)
    windows = warmup_windows(config.warmup)
    window_ends = {end: start for start, end in windows}
    variance = WelfordVariance(posterior.dim)
    warmup_divergences = 0

    _LOGGER.info("Chain %d: warmup of %d iterations", chain, config.warmup)
    for it in range(config.warmup):
        state, stats = nuts_draw(target, state, stepsize, inv_mass, rng, config.max_treedepth)
        warmup_divergences += stats.divergent
        stepsize = adapter.update(stats.accept_stat)
        if any(start <= it < end for start, end in windows):
            variance.add(state.q)
        if it + 1 in window_ends:
            inv_mass = variance.regularized()
            variance = WelfordVariance(posterior.dim)
            stepsize = find_initial_stepsize(target, state, stepsize, inv_mass, rng)
            adapter.restart(stepsize)
            _LOGGER.debug(
                "Chain %d: metric window [%d, %d) done, step size %.4g",
                chain,
                window_ends[it + 1],
                it + 1,
                stepsize,
            )
    if warmup_divergences == config.warmup:
        raise FitFailure(f"Chain {chain}: every warmup transition diverged")
    stepsize = adapter.final()
    _LOGGER.info(
        "Chain %d: warmup done, step size %.4g, %d warmup divergences",
        chain,
        stepsize,
        warmup_divergences,
    )

    draws = np.empty((config.samples, posterior.dim))
    stats_arr = {name: np.empty(config.samples) for name in STAT_NAMES}
    for it in range(config.samples):
        state, stats = nuts_draw(target, state, stepsize, inv_mass, rng, config.max_treedepth)
        draws[it] = posterior.constrain(state.q)
        for name in STAT_NAMES:
            stats_arr[name][it] = float(getattr(stats, name))
    result = ChainResult(chain, draws, stats_arr, stepsize, inv_mass, warmup_divergences)
    _LOGGER.info("Chain %d finished with %d divergences", chain, result.divergences)
    return result


@dataclass
class PosteriorDraws:
    """Constrained draws of all chains."""

    names: list[str]
    array: NDArray[np.float64]
    stats: dict[str, NDArray[np.float64]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Check shapes."""
        if self.array.ndim != 3 or self.array.shape[2] != len(self.names):
            raise UsageError(
                f"Draw array of shape {self.array.shape} does not match {len(self.names)} names"
            )

    @property
    def chains(self) -> int:
        return self.array.shape[0]

    @property
    def samples(self) -> int:
        return self.array.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError as err:
            raise UsageError(f"Unknown parameter {name!r}") from err

    def param(self, name: str) -> NDArray[np.float64]:
        """(chains, samples) draws of one parameter."""
        return self.array[:, :, self.index(name)]

    def block(self, prefix: str) -> tuple[list[str], NDArray[np.float64]]:
        """Names and (chains, samples, m) draws of every parameter in a block."""
        idx = [i for i, name in enumerate(self.names) if name.split("[", 1)[0] == prefix]
        return [self.names[i] for i in idx], self.array[:, :, idx]

    def flat(self) -> NDArray[np.float64]:
        """(chains * samples, dim) draws, chain-major."""
        return self.array.reshape(-1, self.array.shape[2])

    def divergences(self) -> int:
        if "divergent" not in self.stats:
            return 0
        return int(np.sum(self.stats["divergent"]))

    @classmethod
    def from_chains(cls, names: list[str], results: list[ChainResult]) -> PosteriorDraws:
        """Stack chain results ordered by chain index and attach warnings."""
        results = sorted(results, key=lambda r: r.chain)
        array = np.stack([r.draws for r in results])
        stats = {name: np.stack([r.stats[name] for r in results]) for name in STAT_NAMES}
        draws = cls(names, array, stats)
        fraction = draws.divergences() / array.shape[0] / array.shape[1]
        if fraction > DIVERGENCE_WARN_FRACTION:
            message = f"{fraction:.1%} of post-warmup transitions diverged"
            _LOGGER.warning(message)
            draws.warnings.append(message)
        return draws

    def to_frame(self) -> pd.DataFrame:
        """Long draws table: chain, draw, then one column per parameter."""
        chains, samples, _ = self.array.shape
        frame = pd.DataFrame(self.flat(), columns=self.names)
        frame.insert(0, "draw", np.tile(np.arange(1, samples + 1), chains))
        frame.insert(0, "chain", np.repeat(np.arange(1, chains + 1), samples))
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> PosteriorDraws:
        """Inverse of :meth:`to_frame`."""
        chains = int(frame["chain"].nunique())
        names = [col for col in frame.columns if col not in ("chain", "draw")]
        frame = frame.sort_values(["chain", "draw"], kind="stable")
        values = frame[names].to_numpy(dtype=float)
        return cls(names, values.reshape(chains, -1, len(names)))
