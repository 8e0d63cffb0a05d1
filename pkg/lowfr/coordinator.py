"""Multi-chain coordinator."""

from __future__ import annotations

import asyncio
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
import logging
import os

from .const import DEFAULT_JOBS, ENV_JOBS
from .errors import FitFailure, UsageError
from .sampler import ChainResult, Posterior, PosteriorDraws, SamplerConfig, run_chain

_LOGGER = logging.getLogger(__name__)


def default_jobs() -> int:
    """Worker count from the environment, falling back to one."""
    raw = os.environ.get(ENV_JOBS)
    if raw is None:
        return DEFAULT_JOBS
    try:
        jobs = int(raw)
    except ValueError as err:
        raise UsageError(f"{ENV_JOBS} must be an integer, got {raw!r}") from err
    if jobs < 1:
        raise UsageError(f"{ENV_JOBS} must be >= 1, got {jobs}")
    return jobs


class ChainCoordinator:
    """Run the chains of one fit, in-process or on a bounded process pool."""

    def __init__(
        self,
        posterior: Posterior,
        config: SamplerConfig,
        jobs: int | None = None,
        name: str = "fit",
    ) -> None:
        """Initialize the coordinator.

        Args:
            posterior: Model to sample; must be picklable when jobs > 1
            config: Sampler settings
            jobs: Worker processes; None reads the environment
            name: Label used in log messages

        """
        self.posterior = posterior
        self.config = config
        self.jobs = default_jobs() if jobs is None else jobs
        if self.jobs < 1:
            raise UsageError(f"jobs must be >= 1, got {self.jobs}")
        self.name = name
        self.draws: PosteriorDraws | None = None

    async def async_run(self) -> PosteriorDraws:
        """Run every chain and gather the results in chain order.

        Raises:
            FitFailure: If a worker process dies

        """
        chains = range(self.config.chains)
        workers = min(self.jobs, self.config.chains)
        _LOGGER.info(
            "%s: sampling %d chains with %d worker(s)", self.name, self.config.chains, workers
        )
        if workers == 1:
            results: list[ChainResult] = [
                run_chain(self.posterior, self.config, chain) for chain in chains
            ]
        else:
            loop = asyncio.get_running_loop()
            try:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    results = list(
                        await asyncio.gather(
                            *(
                                loop.run_in_executor(
                                    pool, run_chain, self.posterior, self.config, chain
                                )
                                for chain in chains
                            )
                        )
                    )
            except BrokenProcessPool as err:
                raise FitFailure(f"{self.name}: a chain worker died") from err

        self.draws = PosteriorDraws.from_chains(self.posterior.parameter_names(), results)
        _LOGGER.debug("%s: %d divergences in total", self.name, self.draws.divergences())
        return self.draws


def run_chains(
    posterior: Posterior, config: SamplerConfig, jobs: int | None = None
) -> PosteriorDraws:
    """Synchronous entry point around :class:`ChainCoordinator`."""
    return asyncio.run(ChainCoordinator(posterior, config, jobs).async_run())
