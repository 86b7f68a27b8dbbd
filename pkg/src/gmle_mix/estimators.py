"""Estimators of the mean trait proportion across strata."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import MixingDistribution, ParameterGrid, eta_vector, functional_mean
from .models import BinomialStratumKernel, ModelKernel, PoissonStratumKernel, as_count_arrays
from .npmle import EmConfig, EmReport, LikelihoodMatrix, build_likelihood_matrix, em_fit

NEAR_SINGULAR_RESPONSE = 1e-3


@dataclass(frozen=True)
class Undefined:
    """Stand-in for an estimate that does not exist for the given data."""

    reason: str
    empty_strata: int = 0

    def __bool__(self) -> bool:
        return False

    def to_dict(self) -> dict:
        return {"undefined": True, "reason": self.reason, "empty_strata": self.empty_strata}


def is_defined(value) -> bool:
    return not isinstance(value, Undefined)


def naive_estimator(data, skip_empty: bool = False) -> float | Undefined:
    """Mean of the per-stratum proportions x_i / k_i.

    Undefined as soon as one stratum has k_i = 0, unless ``skip_empty`` is
    set, in which case the mean runs over the strata with k_i > 0 only.
    """
    x, k = as_count_arrays(data)
    if len(k) == 0:
        return Undefined("no strata")
    empty = int(np.sum(k == 0))
    if empty and not skip_empty:
        return Undefined(f"{empty} strata with k = 0", empty)
    if empty == len(k):
        return Undefined("every stratum is empty", empty)
    pos = k > 0
    return float(np.mean(x[pos] / k[pos]))


def extreme_collapse_estimator(data) -> float | Undefined:
    """Pooled ratio sum(x) / sum(k)."""
    x, k = as_count_arrays(data)
    total = int(k.sum())
    if total == 0:
        return Undefined("sum of k is zero", int(np.sum(k == 0)))
    return float(x.sum() / total)


def _eta_values(L: LikelihoodMatrix, w: MixingDistribution, eta) -> np.ndarray:
    values = eta_vector(w.grid, eta)
    if len(values) != L.m:
        raise ValueError("eta must have one value per atom")
    return values


def posterior_means(L: LikelihoodMatrix, w: MixingDistribution, eta) -> np.ndarray:
    """E(eta(theta) | Y_i) under ``w`` for every observation, in input order."""
    values = _eta_values(L, w, eta)
    joint = L.values * w.weights[None, :]
    f = joint.sum(axis=1)
    if np.any(f <= 0):
        bad = int(L.first_index[np.flatnonzero(f <= 0)[0]])
        raise ValueError(f"observation {bad} has zero mixture likelihood")
    return (joint @ values / f)[L.inverse]


def posterior_mean(L: LikelihoodMatrix, w: MixingDistribution, eta, i: int) -> float:
    values = _eta_values(L, w, eta)
    row = L.values[L.inverse[i]] * w.weights
    f = row.sum()
    if f <= 0:
        raise ValueError(f"observation {i} has zero mixture likelihood")
    return float(row @ values / f)


def gmle_plug_in(w: MixingDistribution, eta) -> float:
    return functional_mean(w, eta)


def truncated_reweight(w_t: MixingDistribution, kappa0: int) -> MixingDistribution:
    """Turn a fit on responders only into the mixing law of all strata.

    Each atom is divided by its response probability 1 - (1 - pi)^kappa0,
    with pi the first coordinate, and the result renormalized.
    """
    if kappa0 < 1:
        raise ValueError("kappa0 must be a positive integer")
    pi = w_t.grid.atoms[:, 0]
    live = w_t.weights > 0
    dead = np.flatnonzero(live & (pi <= 0))
    if len(dead):
        raise ValueError(f"atoms {dead.tolist()} carry weight but have pi = 0; the reweighting is undefined")
    with np.errstate(divide="ignore"):
        resp = -np.expm1(kappa0 * np.log1p(-np.minimum(pi, 1.0)))
    raw = np.zeros_like(w_t.weights)
    raw[live] = w_t.weights[live] / resp[live]
    diagnostics = list(w_t.diagnostics)
    weak = np.flatnonzero(live & (resp < NEAR_SINGULAR_RESPONSE))
    if len(weak):
        diagnostics.append(
            f"near-singular reweighting: atoms {weak.tolist()} have response probability below {NEAR_SINGULAR_RESPONSE}"
        )
    return MixingDistribution(w_t.grid, raw / raw.sum(), diagnostics)


def _json_value(v):
    if isinstance(v, Undefined):
        return v.to_dict()
    return v


@dataclass(eq=False)
class EstimateSet:
    naive: float | Undefined
    extreme_collapse: float | Undefined
    gmle: float
    posterior_means: np.ndarray
    fit: EmReport | None = None
    empty_strata: int = 0
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self, include_posterior: bool = False) -> dict:
        out = {
            "naive": _json_value(self.naive),
            "extreme_collapse": _json_value(self.extreme_collapse),
            "gmle": self.gmle,
            "empty_strata": self.empty_strata,
        }
        if self.fit is not None:
            out["em"] = self.fit.to_dict()
        if include_posterior:
            out["posterior_means"] = self.posterior_means.tolist()
        if self.diagnostics:
            out["diagnostics"] = self.diagnostics
        return out

    def to_json(self, include_posterior: bool = False) -> str:
        return json.dumps(self.to_dict(include_posterior), sort_keys=True)


def estimate_all(
    kernel: ModelKernel,
    data,
    grid: ParameterGrid,
    em_config: EmConfig = EmConfig(),
    eta=None,
    naive_skip_empty: bool = False,
) -> EstimateSet:
    """Fit the grid GMLE and compute every estimator on the same data."""
    L = build_likelihood_matrix(kernel, data, grid)
    report = em_fit(L, max_iters=em_config.max_iters, stop_tol=em_config.stop_tol, residual_tol=em_config.residual_tol)
    values = kernel.eta(grid.atoms) if eta is None else eta_vector(grid, eta)
    gmle = gmle_plug_in(report.weights, values)
    post = posterior_means(L, report.weights, values)

    if isinstance(kernel, (PoissonStratumKernel, BinomialStratumKernel)):
        obs = kernel.observations(data)
        pairs = obs[:, :2]
        naive = naive_estimator(pairs, skip_empty=naive_skip_empty)
        ec = extreme_collapse_estimator(pairs)
        empty = int(np.sum(obs[:, 1] == 0))
    else:
        naive = ec = Undefined(f"not a count model ({kernel.name})")
        empty = 0
    diagnostics = []
    if not math.isfinite(gmle):
        diagnostics.append("non-finite plug-in estimate")
    return EstimateSet(naive, ec, gmle, post, report, empty, diagnostics)
