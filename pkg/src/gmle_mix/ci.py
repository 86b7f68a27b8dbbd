"""Likelihood-ratio confidence intervals for linear functionals of G.

Observations are binned into M cells.  With cell counts n_j and the cell
probabilities p_j(w) = (C w)_j of a grid mixture w, the confidence set is

    Gamma = {w in simplex : sum_j n_j log p_j(w) >= T},
    T = sum_{n_j > 0} n_j log(n_j / n) - chi2_{M-1, 1-alpha} / 2,

and the interval is the range of eta . w over Gamma.

Each bound is found by a log-barrier method on the Lagrange dual.  For the
maximum of c . w the dual function is

    h(v) = max_k (c + C^T v)_k - n mu(v),
    mu(v) = exp((T + sum_j n_j log v_j - sum_j n_j log n_j) / n),

over v > 0 (the constraint multiplier is eliminated in closed form).  Any
v gives an upper bound on the maximum, so the dual value certifies the
answer.  The primal weights are recovered from the optimality conditions:
the optimal cell probabilities are mu n_j / v_j and the support sits on the
atoms where the max in h(v) is attained.  A final convex combination with
the cell-likelihood maximizer makes the reported weights exactly feasible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import brentq, nnls
from scipy.special import gammainc

from .grid import ParameterGrid
from .models import BinomialStratumKernel, ModelKernel, PoissonStratumKernel, sample_space_counts

DEFAULT_K_CAP_PERCENTILE = 95.0
DEFAULT_MAX_CELLS = 30


class CiInfeasibleError(RuntimeError):
    """No mixture on the grid reaches the likelihood threshold."""

    def __init__(self, message: str, best_loglik: float, threshold: float):
        super().__init__(message)
        self.best_loglik = best_loglik
        self.threshold = threshold


class CiConvergenceError(RuntimeError):
    """The bound solver stopped before certifying its answer."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


# --------------------------------------------------------------------------
# cells
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CellScheme:
    """Explicit outcome cells followed by a catch-all tail cell.

    ``cells[j]`` is a tuple of observation rows (as produced by the kernel's
    ``observations``); an observation falls in cell j if its row is listed
    there, otherwise in the tail.
    """

    cells: tuple[tuple[tuple[int, ...], ...], ...]

    def __post_init__(self):
        cells = tuple(tuple(tuple(int(v) for v in row) for row in cell) for cell in self.cells)
        seen = set()
        for cell in cells:
            if not cell:
                raise ValueError("empty cell")
            for row in cell:
                if row in seen:
                    raise ValueError(f"outcome {row} appears in two cells")
                seen.add(row)
        object.__setattr__(self, "cells", cells)
        if self.M < 2:
            raise ValueError("a cell scheme needs at least two cells (M >= 2)")

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[Sequence[int]]) -> "CellScheme":
        """One explicit cell per outcome, plus the tail."""
        return cls(tuple((tuple(o),) for o in outcomes))

    @property
    def M(self) -> int:
        return len(self.cells) + 1

    def index_of(self, rows: np.ndarray) -> np.ndarray:
        """Cell index of every observation row; the tail is ``M - 1``."""
        lookup = {row: j for j, cell in enumerate(self.cells) for row in cell}
        return np.array([lookup.get(tuple(int(v) for v in r), self.M - 1) for r in rows], dtype=np.int64)

    def labels(self) -> list[str]:
        out = [" | ".join(str(row) for row in cell) for cell in self.cells]
        return out + ["tail"]

    def to_dict(self) -> dict:
        return {"cells": [[list(row) for row in cell] for cell in self.cells], "M": self.M}


@dataclass(frozen=True)
class CellCounts:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=float).reshape(-1)
        if np.any(c < 0) or np.any(c != np.round(c)):
            raise ValueError("cell counts must be nonnegative integers")
        if c.sum() <= 0:
            raise ValueError("cell counts are all zero")
        object.__setattr__(self, "counts", c)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def cell_counts(scheme: CellScheme, kernel: ModelKernel, data) -> CellCounts:
    obs = kernel.observations(data)
    return CellCounts(np.bincount(scheme.index_of(obs), minlength=scheme.M))


def _finite_sample_space(kernel: ModelKernel) -> list[tuple[int, ...]] | None:
    if isinstance(kernel, BinomialStratumKernel) and kernel.kappa is not None:
        return [(x, k, kernel.kappa) for x, k in sample_space_counts(kernel.kappa)]
    return None


def default_cell_scheme(
    kernel: ModelKernel,
    data,
    k_cap_percentile: float = DEFAULT_K_CAP_PERCENTILE,
    max_cells: int = DEFAULT_MAX_CELLS,
) -> CellScheme:
    """Observed outcomes with k at most the ``k_cap_percentile`` of k, plus a tail.

    Cells are ordered by decreasing k, then decreasing x.  When the explicit
    cells would exhaust a finite sample space, the last one becomes the tail.
    Above ``max_cells`` cells the rarest outcomes are merged into the tail.
    """
    if not isinstance(kernel, (PoissonStratumKernel, BinomialStratumKernel)):
        raise ValueError(f"no default cell scheme for model {kernel.name!r}")
    if max_cells < 2:
        raise ValueError("max_cells must be at least 2")
    obs = kernel.observations(data)
    if isinstance(kernel, BinomialStratumKernel) and len(np.unique(obs[:, 2])) > 1:
        raise ValueError("cell schemes need a single design kappa")
    k_cap = np.percentile(obs[:, 1], k_cap_percentile)
    rows, counts = np.unique(obs[obs[:, 1] <= k_cap], axis=0, return_counts=True)
    order = np.lexsort((-rows[:, 0], -rows[:, 1]))
    rows, counts = rows[order], counts[order]

    space = _finite_sample_space(kernel)
    if space is not None and len(rows) == len(space):
        rows, counts = rows[:-1], counts[:-1]
    if len(rows) + 1 > max_cells:
        # stable sort keeps the outcome order among equally frequent cells
        keep = np.sort(np.argsort(-counts, kind="stable")[: max_cells - 1])
        rows = rows[keep]
    if len(rows) == 0:
        # every observation lies above the cap; split off the commonest outcome
        uniq, cnt = np.unique(obs, axis=0, return_counts=True)
        rows = uniq[np.argmax(cnt)][None, :]
    return CellScheme.from_outcomes(rows.tolist())


def cell_probabilities(kernel: ModelKernel, grid: ParameterGrid, scheme: CellScheme) -> np.ndarray:
    """M x m matrix of cell probabilities; the tail row is one minus the rest."""
    if not kernel.discrete:
        raise ValueError("cell probabilities need a discrete model")
    kernel.check_atoms(grid.atoms)
    C = np.zeros((scheme.M, len(grid)))
    for j, cell in enumerate(scheme.cells):
        C[j] = np.exp(kernel.log_matrix(np.array(cell, dtype=np.int64), grid.atoms)).sum(axis=0)
    explicit = C[:-1].sum(axis=0)
    over = explicit - 1.0
    if np.any(over > 1e-8):
        j = int(np.argmax(over))
        raise ValueError(f"cell probabilities at atom {j} sum to {explicit[j]!r} > 1; cells overlap")
    C[-1] = np.maximum(1.0 - explicit, 0.0)
    return C


# --------------------------------------------------------------------------
# chi-square quantile
# --------------------------------------------------------------------------


def chi2_quantile(df: int, level: float) -> float:
    """Quantile of the chi-square law, by root finding on P(df/2, x/2)."""
    if int(df) != df or df < 1:
        raise ValueError("df must be a positive integer")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly between 0 and 1")
    df = int(df)
    a = 0.5 * df

    def cdf_gap(x: float) -> float:
        return gammainc(a, 0.5 * x) - level

    # Wilson-Hilferty start
    z = NormalDist().inv_cdf(level)
    h = 2.0 / (9.0 * df)
    guess = max(df * (1.0 - h + z * math.sqrt(h)) ** 3, 1e-8)
    lo, hi = guess, guess
    while cdf_gap(lo) > 0:
        lo *= 0.5
        if lo < 1e-300:
            return 0.0
    while cdf_gap(hi) < 0:
        hi *= 2.0
    if lo == hi:
        return lo
    return float(brentq(cdf_gap, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


# --------------------------------------------------------------------------
# bounds
# --------------------------------------------------------------------------


@dataclass(eq=False)
class CiResult:
    eta_lower: float
    eta_upper: float
    alpha: float
    constraint_slack_at_bounds: tuple[float, float]
    solver_iterations: int
    M: int = 0
    threshold: float = 0.0
    weights_lower: np.ndarray | None = None
    weights_upper: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, include_weights: bool = False) -> dict:
        out = {
            "eta_lower": self.eta_lower,
            "eta_upper": self.eta_upper,
            "alpha": self.alpha,
            "constraint_slack_at_bounds": list(self.constraint_slack_at_bounds),
            "solver_iterations": self.solver_iterations,
            "M": self.M,
            "threshold": self.threshold,
            "diagnostics": self.diagnostics,
        }
        if include_weights and self.weights_lower is not None:
            out["weights_lower"] = self.weights_lower.tolist()
            out["weights_upper"] = self.weights_upper.tolist()
        return out

    def to_json(self, include_weights: bool = False) -> str:
        return json.dumps(self.to_dict(include_weights), sort_keys=True)

    def summary(self) -> str:
        return f"eta in [{self.eta_lower:.6f}, {self.eta_upper:.6f}] at level {1 - self.alpha:g} ({self.M} cells)"


def _cell_loglik(C: np.ndarray, n: np.ndarray, w: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        return float(n @ np.log(C @ w))


def _em_toward(C, n, threshold, init, max_iters):
    """EM on the cell likelihood until w is comfortably inside the constraint.

    Returns (w, loglik, upper, iterations), where ``upper`` bounds the
    maximal cell log-likelihood over the simplex (restricted to the support
    of ``init``).
    """
    N = n.sum()
    w = init.copy()
    f = C @ w
    for it in range(max_iters + 1):
        ll = float(n @ np.log(f))
        d = C.T @ (n / f) / N
        upper = ll + N * math.log(max(float(d[w > 0].max()), 1.0))
        if upper < threshold:
            return w, ll, upper, it
        if ll >= threshold and ll - threshold >= 0.1 * (upper - threshold):
            return w, ll, upper, it
        if it == max_iters:
            break
        w = w * d
        w /= w.sum()
        f = C @ w
    return w, ll, upper, max_iters


def _dual_barrier(C, n, c, T, gap, max_newton):
    """Maximize c . w over Gamma through the dual; ``c`` is scaled to [0, 1].

    Returns (cert, v, s, t, mu, newton_steps); ``cert`` upper-bounds the
    maximum and the central-path weights are 1 / (t s).
    """
    M, m = C.shape
    N = n.sum()
    base = -(n @ np.log(n))

    def mu_of(v):
        return math.exp((T + n @ np.log(v) + base) / N)

    def barrier(z, v, t):
        if np.any(v <= 0):
            return np.inf
        s = z - c - C.T @ v
        if np.any(s <= 0):
            return np.inf
        return t * (z - N * mu_of(v)) - np.log(s).sum() - np.log(v).sum()

    v = n.copy()
    z = float(np.max(c + C.T @ v)) + 1.0
    t = 1.0
    steps = 0
    while True:
        for _ in range(100):
            s = z - c - C.T @ v
            mu = mu_of(v)
            r = 1.0 / s
            r2 = r * r
            nv = n / v
            g = np.concatenate([[t - r.sum()], -t * mu * nv + C @ r - 1.0 / v])
            H = np.empty((M + 1, M + 1))
            H[0, 0] = r2.sum()
            H[0, 1:] = H[1:, 0] = -(C @ r2)
            H[1:, 1:] = (C * r2) @ C.T + t * mu * (np.diag(n / v**2) - np.outer(nv, nv) / N)
            H[1:, 1:] += np.diag(1.0 / v**2)
            scale = 1.0 / np.sqrt(np.diag(H))
            Hs = H * scale[:, None] * scale[None, :]
            try:
                d = -scale * cho_solve(cho_factor(Hs), g * scale)
            except LinAlgError:
                d = -scale * np.linalg.lstsq(Hs, g * scale, rcond=None)[0]
            dec = -float(g @ d)
            steps += 1
            if dec < 1e-9:
                break
            dz, dv = d[0], d[1:]
            step = 1.0
            ds = dz - C.T @ dv
            for cur, delta in ((s, ds), (v, dv)):
                neg = delta < 0
                if np.any(neg):
                    step = min(step, 0.99 * float(np.min(-cur[neg] / delta[neg])))
            # near the minimizer the Newton step is accepted as is: at large t
            # the barrier value carries too few significant digits for Armijo
            if dec > 0.1:
                f0 = barrier(z, v, t)
                while barrier(z + step * dz, v + step * dv, t) > f0 - 0.25 * step * dec:
                    step *= 0.5
                    if step < 1e-14:
                        break
            z += step * dz
            v = v + step * dv
        if (m + M) / t < gap or steps >= max_newton:
            break
        t *= 10.0
    s = z - c - C.T @ v
    cert = float(np.max(c + C.T @ v)) - N * mu_of(v)
    return cert, v, s, t, mu_of(v), steps


def _recover_primal(C, n, v, s, t, mu, cutoffs):
    """Weights on the near-tight atoms whose cell probabilities match mu n / v."""
    p_star = mu * n / v
    central = 1.0 / (t * s)
    central /= central.sum()
    root = np.sqrt(p_star)
    for cut in cutoffs:
        S = np.flatnonzero(central > cut)
        A = np.vstack([C[:, S] / root[:, None], 1e3 * np.ones(len(S))])
        b = np.concatenate([root, [1e3]])
        ws, _ = nnls(A, b, maxiter=50 * max(len(S), 10))
        if ws.sum() <= 0:
            continue
        w = np.zeros(C.shape[1])
        w[S] = ws / ws.sum()
        yield w


def _to_boundary(C, n, T, w, w_in, c):
    """Feasible point on the line through ``w_in`` and ``w`` where l = T.

    Slides toward ``w_in`` when ``w`` is infeasible and past ``w`` when it
    is strictly feasible and the objective still improves.
    """
    d = w - w_in

    def point(theta):
        return w_in + theta * d

    def slack(theta):
        return _cell_loglik(C, n, point(theta)) - T

    if slack(1.0) < 0:
        theta = brentq(slack, 0.0, 1.0, xtol=1e-15)
        while slack(theta) < 0 and theta > 0:
            theta = max(0.0, theta - 1e-13)
    elif float(c @ d) > 0:
        neg = d < 0
        top = float(np.min(-w_in[neg] / d[neg])) if np.any(neg) else 1e6
        top = min(top, 1e6)
        theta = top if slack(top) >= 0 else brentq(slack, 1.0, top, xtol=1e-15)
        while slack(theta) < 0 and theta > 1.0:
            theta = max(1.0, theta - 1e-13)
    else:
        return w
    out = np.maximum(point(theta), 0.0)
    return out / out.sum()


def _kkt_polish(C, n, c, T, w, iters=60):
    """Newton on the optimality system of the bound restricted to supp(w).

    Unknowns are the support weights, the multiplier of l(w) >= T and the
    multiplier of sum(w) = 1.  Returns None when Newton leaves the simplex.
    """
    S = np.flatnonzero(w > 1e-10 * w.max())
    Cs, cs, ws = C[:, S], c[S], w[S] / w[S].sum()
    p = Cs @ ws
    a = Cs.T @ (n / p)
    lam, nu = np.linalg.lstsq(np.column_stack([a, -np.ones_like(a)]), -cs, rcond=None)[0]
    if not lam > 0:
        return None
    k = len(S)
    for _ in range(iters):
        p = Cs @ ws
        a = Cs.T @ (n / p)
        r = np.concatenate([cs + lam * a - nu, [_cell_loglik(Cs, n, ws) - T, ws.sum() - 1.0]])
        if np.max(np.abs(r[:k])) < 1e-13 * (1 + lam * np.abs(a).max()) and abs(r[k]) < 1e-12 and abs(r[k + 1]) < 1e-14:
            break
        H = Cs.T @ ((n / p**2)[:, None] * Cs)
        J = np.zeros((k + 2, k + 2))
        J[:k, :k] = -lam * H
        J[:k, k] = a
        J[:k, k + 1] = -1.0
        J[k, :k] = a
        J[k + 1, :k] = 1.0
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            return None
        ws = ws + step[:k]
        lam, nu = lam + step[k], nu + step[k + 1]
        if np.any(ws < 0) or not lam > 0:
            return None
    out = np.zeros_like(w)
    out[S] = ws
    return out / out.sum()


def _scalarized_bound(C, n, c, T, w_in, max_iters=20000, rounds=200):
    """Fallback: maximize c.w + mu * l(w) and bisect on mu until l(w) ~ T.

    Used when the barrier cannot resolve a very small confidence set.  The
    inner problem is solved with multiplicative updates; ``c`` must be
    nonnegative.  Returns a feasible point with T <= l(w) <= T + 1e-6 |T|.
    """
    band = 1e-6 * abs(T) + 1e-12
    N = n.sum()

    def inner(mu, w):
        for _ in range(max_iters):
            g = c + mu * (C.T @ (n / (C @ w)))
            if g.max() - g @ w <= 1e-10 * (1.0 + mu * N):
                break
            w = w * g / (g @ w)
        return w

    lo, hi = 0.0, 1.0
    w_hi = inner(hi, w_in.copy())
    while _cell_loglik(C, n, w_hi) < T:
        lo, hi = hi, hi * 10.0
        w_hi = inner(hi, w_hi)
        if hi > 1e16:
            return None
    w = w_hi
    for _ in range(rounds):
        ll = _cell_loglik(C, n, w_hi)
        if ll <= T + band:
            break
        mid = np.sqrt(lo * hi) if lo > 0 else hi / 10.0
        w = inner(mid, w_hi)
        if _cell_loglik(C, n, w) >= T:
            hi, w_hi = mid, w
        else:
            lo = mid
        if lo > 0 and hi / lo < 1 + 1e-12:
            break
    return w_hi


def _ray_certificate(C, n, c, T, w):
    """Dual bound at v = lam * n / (C w), minimized over the scalar lam >= 0.

    Along this ray the dual function is the convex piecewise-linear
    max_k (c_k + lam * (a_k - e)) with a_k = sum_j C_jk n_j / (C w)_j and
    e = n exp((T - l(w)) / n); it equals c . w when w is optimal.
    """
    N = n.sum()
    p = C @ w
    a = C.T @ (n / p)
    e = N * math.exp(min((T - _cell_loglik(C, n, w)) / N, 0.0))
    slope = a - e

    def h(lam):
        return float(np.max(c + lam * slope))

    best = h(0.0)
    if np.all(slope >= 0):
        return best
    hi = 1.0
    while h(2 * hi) < h(hi) and hi < 1e300:
        hi *= 2
    lo, hi = 0.0, 2 * hi
    for _ in range(200):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if h(m1) <= h(m2):
            hi = m2
        else:
            lo = m1
    lam = 0.5 * (lo + hi)
    # exact kink: intersect the lines active just left and right of lam
    left = int(np.argmax(c + lo * slope))
    right = int(np.argmax(c + hi * slope))
    if slope[left] != slope[right]:
        kink = (c[left] - c[right]) / (slope[right] - slope[left])
        if kink > 0:
            best = min(best, h(kink))
    return min(best, h(lam))


def _one_bound(C, n, eta, T, sign, w_in, tol, max_newton):
    """Optimum of sign * eta . w over Gamma; returns (value, w, info)."""
    c = sign * eta
    lo = float(c.min())
    span = float(c.max() - lo)
    cs = (c - lo) / span
    N = n.sum()

    # interior case: weight on the best atoms alone is already feasible
    top = np.flatnonzero(cs >= 1.0 - 1e-12)
    init = np.zeros_like(w_in)
    init[top] = 1.0 / len(top)
    if np.all(C[:, top].sum(axis=1) > 0):
        w_top, ll_top, _, its = _em_toward(C, n, T, init, 2000)
        if ll_top >= T:
            return float(eta @ w_top), w_top, {"active": False, "em_iterations": its, "newton": 0}

    cert, v, s, t, mu, steps = _dual_barrier(C, n, cs, T, gap=1e-9, max_newton=max_newton)
    ll_in = _cell_loglik(C, n, w_in)
    best = None
    for w in _recover_primal(C, n, v, s, t, mu, (1e-8, 1e-10, 1e-12)):
        ll = _cell_loglik(C, n, w)
        w = _to_boundary(C, n, T, w, w_in, cs)
        val = float(cs @ w)
        if best is None or val > best[0]:
            best = (val, w)
        if cert - val > tol:
            polished = _kkt_polish(C, n, cs, T, w)
            if polished is not None:
                polished = _to_boundary(C, n, T, polished, w_in, cs)
                if cs @ polished > val:
                    w, val = polished, float(cs @ polished)
                    if val > best[0]:
                        best = (val, w)
            cert = min(cert, _ray_certificate(C, n, cs, T, w))
        if cert - val <= tol:
            break
    val, w = best
    info = {"active": True, "newton": steps, "dual_gap": (cert - val) * span, "multiplier": mu * N}
    if not cert - val <= tol:
        fallback = _scalarized_bound(C, n, cs, T, w_in)
        if fallback is None:
            raise CiConvergenceError("bound solver did not close the duality gap", info)
        if cs @ fallback > val:
            w = fallback
        info["method"] = "scalarized"
        info["dual_gap"] = None
    return float(eta @ w), w, info


def ci_bounds(
    C: np.ndarray,
    counts: CellCounts | np.ndarray,
    eta_values,
    alpha: float,
    tol: float = 1e-6,
    max_newton: int = 5000,
) -> CiResult:
    """Range of eta . w over the chi-square confidence set of grid mixtures.

    ``eta_values`` holds the functional at every atom; only linear
    functionals w -> eta . w are supported, so callables are rejected.
    ``tol`` is the accepted duality gap relative to the range of eta.
    """
    if callable(eta_values):
        raise TypeError(
            "only linear functionals w -> eta . w are supported; pass eta evaluated at every atom"
        )
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] < 2:
        raise ValueError("C must be an M x m matrix with M >= 2")
    if np.any(C < 0) or not np.all(np.isfinite(C)):
        raise ValueError("cell probabilities must be finite and nonnegative")
    if np.any(np.abs(C.sum(axis=0) - 1.0) > 1e-8):
        raise ValueError("every column of C must sum to 1")
    n_all = counts.counts if isinstance(counts, CellCounts) else CellCounts(counts).counts
    if len(n_all) != C.shape[0]:
        raise ValueError("one count per cell is required")
    eta = np.asarray(eta_values, dtype=float).reshape(-1)
    if len(eta) != C.shape[1]:
        raise ValueError("eta must have one value per atom")
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta values must be finite")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")

    M = C.shape[0]
    N = n_all.sum()
    pos = n_all > 0
    Cp, n = C[pos], n_all[pos]
    T = float(n @ np.log(n / N)) - 0.5 * chi2_quantile(M - 1, 1.0 - alpha)

    dead = np.flatnonzero(Cp.max(axis=1) <= 0)
    if len(dead):
        raise CiInfeasibleError("an observed cell has probability zero under every atom", -np.inf, T)
    w_in, ll_in, upper, em_its = _em_toward(Cp, n, T, np.full(C.shape[1], 1.0 / C.shape[1]), 200000)
    if upper < T:
        raise CiInfeasibleError(
            f"best cell log-likelihood on the grid is at most {upper:.6g} < threshold {T:.6g}", upper, T
        )
    if ll_in < T:
        raise CiConvergenceError(
            "could not find a feasible mixture", {"loglik": ll_in, "upper": upper, "threshold": T}
        )

    span = float(eta.max() - eta.min())
    if span <= 0:
        val = float(eta[0])
        slack = ll_in - T
        return CiResult(val, val, alpha, (slack, slack), em_its, M, T, w_in, w_in.copy(), {"constant_eta": True})

    iterations = em_its
    out = {}
    for name, sign in (("upper", 1.0), ("lower", -1.0)):
        val, w, info = _one_bound(Cp, n, eta, T, sign, w_in, tol, max_newton)
        iterations += info.get("newton", 0) + info.get("em_iterations", 0)
        out[name] = (val, w, _cell_loglik(Cp, n, w) - T, info)
    lower, upper_b = out["lower"][0], out["upper"][0]
    if lower > upper_b:
        # both ends hit the same point up to rounding
        lower = upper_b = 0.5 * (lower + upper_b)
    return CiResult(
        eta_lower=lower,
        eta_upper=upper_b,
        alpha=alpha,
        constraint_slack_at_bounds=(out["lower"][2], out["upper"][2]),
        solver_iterations=int(iterations),
        M=M,
        threshold=T,
        weights_lower=out["lower"][1],
        weights_upper=out["upper"][1],
        diagnostics={"lower": out["lower"][3], "upper": out["upper"][3]},
    )


def confidence_interval(
    kernel: ModelKernel,
    data,
    grid: ParameterGrid,
    alpha: float = 0.05,
    eta_values=None,
    scheme: CellScheme | None = None,
) -> CiResult:
    """Bin ``data`` into cells and bound the proportion functional (or ``eta_values``)."""
    scheme = scheme or default_cell_scheme(kernel, data)
    C = cell_probabilities(kernel, grid, scheme)
    counts = cell_counts(scheme, kernel, data)
    eta = kernel.eta(grid.atoms) if eta_values is None else eta_values
    result = ci_bounds(C, counts, eta, alpha)
    result.diagnostics["cells"] = scheme.labels()
    result.diagnostics["counts"] = counts.counts.astype(int).tolist()
    return result
