"""Finite parameter grids and mixing distributions supported on them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .models import as_count_arrays

XI_GRID_FLOOR = 0.02


@dataclass(frozen=True, eq=False)
class ParameterGrid:
    """Ordered support points; ``atoms`` has shape (m, d)."""

    atoms: np.ndarray
    dims: tuple[int, ...] = ()
    ranges: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2 or len(atoms) == 0:
            raise ValueError("a grid needs at least one atom")
        if len(np.unique(atoms, axis=0)) != len(atoms):
            raise ValueError("grid atoms must be distinct")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        if not self.dims:
            object.__setattr__(self, "dims", (len(atoms),))

    def __len__(self) -> int:
        return len(self.atoms)

    @property
    def ndim(self) -> int:
        return self.atoms.shape[1]

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) if n > 1 else 0.0 for (lo, hi), n in zip(self.ranges, self.dims))


def build_product_grid(axis_specs: Sequence[tuple[float, float, int]]) -> ParameterGrid:
    """Cartesian product of equally spaced axes, endpoints included.

    Atoms are ordered with the first axis varying slowest.
    """
    if not axis_specs:
        raise ValueError("at least one axis is required")
    axes = []
    for lo, hi, count in axis_specs:
        if count < 1:
            raise ValueError("axis count must be positive")
        if lo > hi:
            raise ValueError(f"axis range [{lo}, {hi}] is empty")
        axes.append(np.linspace(lo, hi, int(count)) if count > 1 else np.array([float(lo)]))
    mesh = np.meshgrid(*axes, indexing="ij")
    atoms = np.column_stack([m.reshape(-1) for m in mesh])
    return ParameterGrid(
        atoms,
        dims=tuple(int(c) for _, _, c in axis_specs),
        ranges=tuple((float(lo), float(hi)) for lo, hi, _ in axis_specs),
    )


def default_xi_range(data) -> list[tuple[float, float]]:
    """Rate ranges for the (xi1, xi2) grid of Model (ii).

    The floor keeps lambda = 0 off the grid; the ceiling sits three Poisson
    standard deviations above the largest observed success or failure count.
    """
    x, k = as_count_arrays(data)
    if len(x) == 0:
        raise ValueError("cannot choose a grid range from empty data")
    top = float(max(x.max(), (k - x).max()))
    hi = top + 3.0 * math.sqrt(top + 1.0)
    return [(XI_GRID_FLOOR, hi), (XI_GRID_FLOOR, hi)]


@dataclass(eq=False)
class MixingDistribution:
    """Probability weights over the atoms of a grid."""

    grid: ParameterGrid
    weights: np.ndarray
    diagnostics: list[str] = field(default_factory=list)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(w) != len(self.grid):
            raise ValueError(f"{len(w)} weights for a grid of {len(self.grid)} atoms")
        if np.any(~np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        self.weights = w

    @classmethod
    def uniform(cls, grid: ParameterGrid) -> "MixingDistribution":
        return cls(grid, np.full(len(grid), 1.0 / len(grid)))

    @classmethod
    def degenerate(cls, grid: ParameterGrid, index: int) -> "MixingDistribution":
        w = np.zeros(len(grid))
        w[index] = 1.0
        return cls(grid, w)

    def support(self, tol: float = 0.0) -> np.ndarray:
        return np.flatnonzero(self.weights > tol)

    def to_dict(self) -> dict:
        return {"atoms": self.grid.atoms.tolist(), "weights": self.weights.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, payload: dict) -> "MixingDistribution":
        w = np.asarray(payload["weights"], dtype=float)
        # rounding in a round trip through text must not fail validation
        w = w / w.sum()
        return cls(ParameterGrid(np.asarray(payload["atoms"], dtype=float)), w)

    @classmethod
    def from_json(cls, text: str) -> "MixingDistribution":
        return cls.from_dict(json.loads(text))


def eta_vector(grid: ParameterGrid, eta: Callable | np.ndarray) -> np.ndarray:
    """Evaluate ``eta`` at every atom (or validate a precomputed vector)."""
    if callable(eta):
        values = np.array([eta(tuple(a)) for a in grid.atoms], dtype=float)
    else:
        values = np.asarray(eta, dtype=float).reshape(-1)
    if len(values) != len(grid):
        raise ValueError("eta must have one value per atom")
    return values


def functional_mean(mix: MixingDistribution, eta: Callable | np.ndarray) -> float:
    """E_G eta(theta) for the grid mixture ``mix``."""
    return float(np.dot(mix.weights, eta_vector(mix.grid, eta)))
