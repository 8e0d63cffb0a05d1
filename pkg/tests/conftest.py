"""Common fixtures for lowfr tests."""

from __future__ import annotations

import numpy as np
import pytest

from lowfr.data import ExposureDataset
from lowfr.sampler import SamplerConfig


class GaussianTarget:
    """Independent normal target exposing the sampler protocol."""

    def __init__(self, mean, sd) -> None:
        self.mean = np.asarray(mean, dtype=float)
        self.sd = np.asarray(sd, dtype=float)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density_and_grad(self, u):
        z = (u - self.mean) / self.sd
        return -0.5 * float(z @ z), -z / self.sd

    def initial_point(self, rng):
        return rng.uniform(-2.0, 2.0, size=self.dim)

    def constrain(self, u):
        return np.asarray(u, dtype=float).copy()

    def parameter_names(self):
        return [f"x[{i + 1}]" for i in range(self.dim)]


@pytest.fixture
def rng():
    """Return a seeded random generator."""
    return np.random.default_rng(20240607)


@pytest.fixture
def raw_data():
    """Return a small dataset with one binary covariate and two missing cells."""
    gen = np.random.default_rng(7)
    n, p, t = 16, 3, 2
    x = gen.normal(size=(n, p, t)) + np.arange(p)[None, :, None]
    sex = np.tile([0.0, 1.0], n // 2)
    y = 1.0 + x[:, 0, :].sum(axis=1) - 0.5 * x[:, 2, 1] + 0.3 * sex + gen.normal(size=n)
    x[2, 1, 0] = np.nan
    x[5, 0, 1] = np.nan
    return ExposureDataset.from_arrays(
        y, x, sex[:, None], exposure_names=["lead", "zinc", "pm25"], covariate_names=["sex"]
    )


@pytest.fixture
def complete_data(raw_data):
    """Return the small dataset with its missing cells filled in."""
    x = np.where(raw_data.mask, 0.5, raw_data.x)
    return ExposureDataset.from_arrays(
        raw_data.y,
        x,
        raw_data.z,
        exposure_names=raw_data.exposure_names,
        covariate_names=raw_data.covariate_names,
    )


@pytest.fixture
def gaussian_target():
    """Return a two-dimensional normal target."""
    return GaussianTarget([1.0, -2.0], [0.5, 2.0])


@pytest.fixture
def wide_gaussian_target():
    """Return a ten-dimensional normal target with unequal scales."""
    return GaussianTarget(np.zeros(10), np.linspace(0.5, 2.0, 10))


@pytest.fixture
def numeric_grad():
    """Return a central finite-difference gradient function."""

    def grad(func, u, step=1e-6):
        out = np.empty_like(u)
        for i in range(u.size):
            shift = np.zeros_like(u)
            shift[i] = step
            out[i] = (func(u + shift) - func(u - shift)) / (2.0 * step)
        return out

    return grad


@pytest.fixture
def tiny_sampler():
    """Return sampler settings small enough for unit tests."""
    return SamplerConfig(chains=2, warmup=40, samples=20, seed=3, max_treedepth=5)
