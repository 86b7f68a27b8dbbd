"""Grid-constrained GMLE of a mixing distribution, computed by EM.

Identical observations share a row of the likelihood matrix; a row's
``multiplicity`` says how many observations it stands for.  This is exact,
since the EM update and the log-likelihood only depend on the data through
the multiset of rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import MixingDistribution, ParameterGrid
from .models import ModelKernel

# rows whose largest entry falls below exp(LOG_RESCALE_BELOW) ~ 1e-300 get rescaled
LOG_RESCALE_BELOW = -690.0


class AllZeroRowError(ValueError):
    """No atom of the grid can explain some observation."""

    def __init__(self, index: int):
        super().__init__(f"observation {index} has zero likelihood at every grid atom")
        self.index = index


@dataclass(eq=False)
class LikelihoodMatrix:
    """Kernel values f(Y_i | atom_j) with duplicate observations merged.

    ``values[r] * exp(log_offset[r])`` is the true kernel row for every
    observation ``i`` with ``inverse[i] == r``.
    """

    values: np.ndarray
    multiplicity: np.ndarray
    inverse: np.ndarray
    log_offset: np.ndarray
    grid: ParameterGrid | None = None
    first_index: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("likelihood values must be a matrix")
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise ValueError("likelihood entries must be finite and nonnegative")
        self.values = v
        self.multiplicity = np.asarray(self.multiplicity, dtype=float)
        self.inverse = np.asarray(self.inverse, dtype=np.int64).reshape(-1)
        self.log_offset = np.asarray(self.log_offset, dtype=float)
        if self.first_index is None:
            first = np.full(len(v), -1, dtype=np.int64)
            for i in range(len(self.inverse) - 1, -1, -1):
                first[self.inverse[i]] = i
            self.first_index = first
        zero = np.flatnonzero(v.max(axis=1) <= 0) if v.shape[1] else np.arange(len(v))
        if len(zero):
            raise AllZeroRowError(int(self.first_index[zero].min()))
        if self.grid is not None and len(self.grid) != v.shape[1]:
            raise ValueError("grid size does not match the number of columns")

    @classmethod
    def from_array(cls, values, grid: ParameterGrid | None = None) -> "LikelihoodMatrix":
        """Wrap a dense n x m array, one row per observation."""
        v = np.asarray(values, dtype=float)
        n = len(v)
        return cls(v, np.ones(n), np.arange(n), np.zeros(n), grid)

    @property
    def n(self) -> int:
        return int(round(self.multiplicity.sum()))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def dense(self) -> np.ndarray:
        """The full n x m matrix in original observation order."""
        return self.values[self.inverse] * np.exp(self.log_offset[self.inverse])[:, None]

    def column_grid(self) -> ParameterGrid:
        if self.grid is not None:
            return self.grid
        return ParameterGrid(np.arange(self.m, dtype=float))


def build_likelihood_matrix(kernel: ModelKernel, data, grid: ParameterGrid) -> LikelihoodMatrix:
    obs = kernel.observations(data)
    if len(obs) == 0:
        raise ValueError("no observations")
    kernel.check_atoms(grid.atoms)
    uniq, first, inverse, counts = np.unique(
        obs, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    logl = kernel.log_matrix(uniq, grid.atoms)
    rowmax = logl.max(axis=1)
    dead = np.flatnonzero(~np.isfinite(rowmax))
    if len(dead):
        raise AllZeroRowError(int(first[dead].min()))
    offset = np.where(rowmax < LOG_RESCALE_BELOW, rowmax, 0.0)
    values = np.exp(logl - offset[:, None])
    return LikelihoodMatrix(values, counts, inverse.reshape(-1), offset, grid, first)


def _weights_of(L: LikelihoodMatrix, w) -> np.ndarray:
    arr = w.weights if isinstance(w, MixingDistribution) else np.asarray(w, dtype=float)
    if arr.shape != (L.m,):
        raise ValueError(f"expected {L.m} weights, got shape {arr.shape}")
    return arr


def mixture_density(L: LikelihoodMatrix, w) -> np.ndarray:
    """(L w) per distinct row, in the rescaled units of ``L.values``."""
    return L.values @ _weights_of(L, w)


def log_likelihood(L: LikelihoodMatrix, w) -> float:
    """sum_i log(sum_j w_j L_ij)."""
    f = mixture_density(L, w)
    if np.any(f <= 0):
        bad = int(L.first_index[np.flatnonzero(f <= 0)[0]])
        raise ValueError(f"observation {bad} has zero mixture likelihood")
    return float(L.multiplicity @ (np.log(f) + L.log_offset))


def em_multiplier(L: LikelihoodMatrix, w) -> np.ndarray:
    """d_j = n^-1 sum_i L_ij / (L w)_i; the EM fixed point has d_j = 1 on the support."""
    f = mixture_density(L, w)
    return L.values.T @ (L.multiplicity / (L.n * f))


@dataclass(eq=False)
class EmReport:
    weights: MixingDistribution
    loglik_trace: np.ndarray
    iterations_run: int
    fixed_point_residual: float
    diagnostics: list[str] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    def to_dict(self, include_trace: bool = False) -> dict:
        out = {
            "weights": self.weights.to_dict(),
            "loglik": self.loglik,
            "iterations": self.iterations_run,
            "fixed_point_residual": self.fixed_point_residual,
        }
        if include_trace:
            out["loglik_trace"] = self.loglik_trace.tolist()
        return out


@dataclass(frozen=True)
class EmConfig:
    """Stopping rules; the defaults run exactly 1000 iterations."""

    max_iters: int = 1000
    stop_tol: float = 0.0
    residual_tol: float = 0.0


def em_fit(
    L: LikelihoodMatrix,
    init: MixingDistribution | np.ndarray | None = None,
    max_iters: int = 1000,
    stop_tol: float = 0.0,
    residual_tol: float = 0.0,
) -> EmReport:
    """Fixed-point EM  w_j <- w_j * n^-1 sum_i L_ij / (L w)_i.

    Stops after ``max_iters`` updates, or earlier when the log-likelihood gain
    of an update drops below ``stop_tol`` or the fixed-point residual drops
    below ``residual_tol`` (both disabled when 0).  Atoms with zero initial
    weight stay at zero.
    """
    if max_iters < 0:
        raise ValueError("max_iters must be nonnegative")
    if init is None:
        w = np.full(L.m, 1.0 / L.m)
    else:
        w = _weights_of(L, init).copy()
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("initial weights must be a probability vector")
    V = L.values
    c = L.multiplicity / L.multiplicity.sum()
    const = float(L.multiplicity @ L.log_offset)

    trace = []
    f = V @ w
    if np.any(f <= 0):
        bad = int(L.first_index[np.flatnonzero(f <= 0)[0]])
        raise ValueError(f"observation {bad} has zero likelihood under the initial weights")
    ll = float(L.multiplicity @ np.log(f)) + const
    trace.append(ll)
    iters = 0
    residual = np.inf
    while iters < max_iters:
        d = V.T @ (c / f)
        w_new = w * d
        residual = float(np.max(np.abs(w_new - w)))
        w = w_new / w_new.sum()
        f = V @ w
        ll_new = float(L.multiplicity @ np.log(f)) + const
        trace.append(ll_new)
        iters += 1
        if stop_tol > 0 and ll_new - ll < stop_tol:
            break
        ll = ll_new
        if residual_tol > 0 and residual < residual_tol:
            break
    residual = float(np.max(np.abs(w * (V.T @ (c / f)) - w)))
    grid = L.column_grid()
    return EmReport(MixingDistribution(grid, w), np.array(trace), iters, residual)


def brute_force_gmle(L: LikelihoodMatrix, grid: ParameterGrid | None = None) -> MixingDistribution:
    """Exhaustive simplex search for the grid GMLE on at most three atoms.

    Scans the simplex at step 1e-3, then at step 1e-5 within 1e-3 of the best
    point.  Test oracle only.
    """
    m = L.m
    if m > 3:
        raise ValueError("brute-force search is limited to m <= 3 atoms")
    grid = grid or L.column_grid()
    if m == 1:
        return MixingDistribution(grid, np.ones(1))

    def objective(points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        for s in range(0, len(points), 20000):
            block = points[s : s + 20000]
            with np.errstate(divide="ignore"):
                out[s : s + 20000] = L.multiplicity @ np.log(L.values @ block.T)
        return out

    if m == 2:
        a = np.linspace(0.0, 1.0, 1001)
        pts = np.column_stack([a, 1 - a])
        best = pts[np.argmax(objective(pts))]
        lo, hi = max(0.0, best[0] - 1e-3), min(1.0, best[0] + 1e-3)
        a = np.linspace(lo, hi, int(round((hi - lo) / 1e-5)) + 1)
        pts = np.column_stack([a, 1 - a])
    else:
        i, j = np.meshgrid(np.arange(1001), np.arange(1001), indexing="ij")
        keep = i + j <= 1000
        a, b = i[keep] / 1000.0, j[keep] / 1000.0
        pts = np.column_stack([a, b, 1 - a - b])
        best = pts[np.argmax(objective(pts))]
        offs = np.linspace(-1e-3, 1e-3, 201)
        a = np.clip(best[0] + offs, 0, 1)
        b = np.clip(best[1] + offs, 0, 1)
        a, b = (g.reshape(-1) for g in np.meshgrid(a, b, indexing="ij"))
        keep = a + b <= 1.0 + 1e-15
        pts = np.column_stack([a[keep], b[keep], np.clip(1 - a[keep] - b[keep], 0, 1)])
    best = pts[np.argmax(objective(pts))]
    return MixingDistribution(grid, best / best.sum())
