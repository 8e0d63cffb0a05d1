"""Flat parameter vectors with a named block layout.

The sampler moves on an unconstrained vector. Each block of that vector is
stored either as is, on the log scale (positive parameters) or on the logit
scale (parameters in (0, 1)). Block names are the names of the constrained
parameters, so ``to_constrained(u)["sigma2"]`` is the vector of variances.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass
import itertools
import logging
import math

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit, logit

from .const import SATURATION_LIMIT
from .errors import LayoutError, SaturationError

_LOGGER = logging.getLogger(__name__)

IDENTITY = "identity"
LOG = "log"
LOGIT = "logit"
TRANSFORMS = (IDENTITY, LOG, LOGIT)

ParamView = dict[str, NDArray[np.float64]]


@dataclass(frozen=True)
class Block:
    """A named, shaped slice of the flat parameter vector."""

    name: str
    shape: tuple[int, ...]
    transform: str = IDENTITY
    offset: int = 0

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)

    def labels(self) -> list[str]:
        """One label per entry, 1-based, row-major."""
        if self.shape == ():
            return [self.name]
        return [
            f"{self.name}[{','.join(str(i + 1) for i in idx)}]"
            for idx in itertools.product(*(range(s) for s in self.shape))
        ]


class ParameterLayout:
    """Ordered collection of blocks covering a flat parameter vector."""

    def __init__(self, blocks: Iterable[tuple[str, tuple[int, ...], str]]) -> None:
        """Initialize the layout.

        Args:
            blocks: (name, shape, transform) triples in storage order

        """
        self._blocks: dict[str, Block] = {}
        offset = 0
        for name, shape, transform in blocks:
            if transform not in TRANSFORMS:
                raise LayoutError(f"Unknown transform {transform!r} for block {name}")
            if name in self._blocks:
                raise LayoutError(f"Duplicate block {name}")
            block = Block(name, tuple(shape), transform, offset)
            self._blocks[name] = block
            offset += block.size
        self.dim = offset

    def __contains__(self, name: object) -> bool:
        return name in self._blocks

    def __getitem__(self, name: str) -> Block:
        return self._blocks[name]

    @property
    def blocks(self) -> list[Block]:
        return list(self._blocks.values())

    def names(self) -> list[str]:
        """Labels of every entry of the flat vector, in storage order."""
        return [label for block in self._blocks.values() for label in block.labels()]

    def _check(self, u: NDArray[np.float64]) -> NDArray[np.float64]:
        arr = np.asarray(u, dtype=float)
        if arr.shape != (self.dim,):
            raise LayoutError(f"Parameter vector has shape {arr.shape}, layout needs ({self.dim},)")
        return arr

    def unpack(self, u: NDArray[np.float64]) -> ParamView:
        """Split an unconstrained vector into reshaped block views."""
        arr = self._check(u)
        return {name: arr[b.slice].reshape(b.shape) for name, b in self._blocks.items()}

    def to_constrained(self, u: NDArray[np.float64]) -> ParamView:
        """Apply exp / logistic transforms block by block.

        Raises:
            LayoutError: If the vector length does not match
            SaturationError: If a transformed slot exceeds the overflow guard

        """
        arr = self._check(u)
        view: ParamView = {}
        for name, block in self._blocks.items():
            raw = arr[block.slice].reshape(block.shape)
            if block.transform == IDENTITY:
                view[name] = raw.copy()
                continue
            if raw.size and np.max(np.abs(raw)) > SATURATION_LIMIT:
                raise SaturationError(f"Block {name} saturates its {block.transform} transform")
            view[name] = np.exp(raw) if block.transform == LOG else expit(raw)
        return view

    def to_unconstrained(self, view: Mapping[str, NDArray[np.float64]]) -> NDArray[np.float64]:
        """Inverse of :meth:`to_constrained`."""
        u = np.empty(self.dim)
        for name, block in self._blocks.items():
            try:
                value = np.asarray(view[name], dtype=float)
            except KeyError as err:
                raise LayoutError(f"Missing block {name}") from err
            if value.size != block.size:
                raise LayoutError(f"Block {name} has {value.size} entries, expected {block.size}")
            if block.transform == LOG:
                value = np.log(value)
            elif block.transform == LOGIT:
                value = logit(value)
            u[block.slice] = value.ravel()
        return u

    def flatten(self, view: Mapping[str, NDArray[np.float64]]) -> NDArray[np.float64]:
        """Concatenate a view (any scale) in storage order."""
        return np.concatenate(
            [np.asarray(view[name], dtype=float).ravel() for name in self._blocks]
        ) if self._blocks else np.zeros(0)

    def unflatten(self, flat: NDArray[np.float64]) -> ParamView:
        """Split a flat vector (any scale) into reshaped blocks without transforming."""
        return self.unpack(flat)

    def constrained_flat(self, u: NDArray[np.float64]) -> NDArray[np.float64]:
        """Unconstrained vector to the flat constrained vector."""
        return self.flatten(self.to_constrained(u))

    def slot_transforms(self) -> NDArray[np.str_]:
        """Transform name of every flat slot."""
        return np.concatenate(
            [np.full(b.size, b.transform) for b in self._blocks.values()]
        )
