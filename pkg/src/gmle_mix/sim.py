"""Monte Carlo campaigns over two-type stratum populations.

Randomness comes from numpy's Philox generator.  Replication r of a
campaign with seed s uses the r-th child of ``SeedSequence(s)``, so a
replication's draws do not depend on how many replications run, in what
order, or on how many threads.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimators import estimate_all, is_defined
from .grid import ParameterGrid, build_product_grid
from .models import BinomialStratumKernel, ModelKernel, PoissonStratumKernel
from .npmle import EmConfig, build_likelihood_matrix, em_fit

MODELS = ("poisson_sizes", "binomial_sizes")
ESTIMATORS = ("naive", "extreme_collapse", "gmle")


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def replication_rngs(seed: int, replications: int) -> list[np.random.Generator]:
    return [make_rng(child) for child in np.random.SeedSequence(seed).spawn(replications)]


# --------------------------------------------------------------------------
# populations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Law:
    """Uniform law on [lo, hi]; a point mass when lo == hi."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("law bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"uniform law needs lo <= hi, got [{self.lo}, {self.hi}]")

    @classmethod
    def parse(cls, value) -> "Law":
        if isinstance(value, (int, float)):
            return cls(float(value), float(value))
        lo, hi = value
        return cls(float(lo), float(hi))

    @property
    def fixed(self) -> bool:
        return self.lo == self.hi

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.fixed:
            return np.full(n, self.lo)
        return rng.uniform(self.lo, self.hi, n)

    def to_json(self):
        return self.lo if self.fixed else [self.lo, self.hi]


@dataclass(frozen=True)
class GroupSpec:
    """``n_strata`` strata whose size parameter and trait proportion follow two laws.

    The size parameter is lambda for Poisson sizes and pi for binomial sizes.
    """

    n_strata: int
    size: Law
    p: Law
    kappa: int | None = None

    def to_dict(self, model: str) -> dict:
        key = "lam" if model == "poisson_sizes" else "pi"
        out = {"n_strata": self.n_strata, key: self.size.to_json(), "p": self.p.to_json()}
        if self.kappa is not None:
            out["kappa"] = self.kappa
        return out


@dataclass(frozen=True)
class PopulationSpec:
    model: str
    groups: tuple[GroupSpec, ...]

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if not self.groups or sum(g.n_strata for g in self.groups) < 1:
            raise ValueError("a population needs at least one stratum")
        for g in self.groups:
            if g.n_strata < 0:
                raise ValueError("n_strata must be nonnegative")
            if not (0.0 <= g.p.lo and g.p.hi <= 1.0):
                raise ValueError("p must lie in [0, 1]")
            if self.model == "poisson_sizes":
                if g.size.lo < 0:
                    raise ValueError("lambda must be nonnegative")
            else:
                if not (0.0 <= g.size.lo and g.size.hi <= 1.0):
                    raise ValueError("pi must lie in [0, 1]")
                if g.kappa is None or g.kappa < 1:
                    raise ValueError("binomial sizes need a positive integer kappa per group")

    @classmethod
    def from_dict(cls, model: str, groups: Sequence[dict]) -> "PopulationSpec":
        parsed = []
        for g in groups:
            if model == "poisson_sizes":
                size = g["lam"]
            elif model == "binomial_sizes":
                size = g["pi"]
            else:
                raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
            kappa = g.get("kappa")
            parsed.append(GroupSpec(int(g["n_strata"]), Law.parse(size), Law.parse(g["p"]), None if kappa is None else int(kappa)))
        return cls(model, tuple(parsed))

    def to_dict(self) -> dict:
        return {"model": self.model, "groups": [g.to_dict(self.model) for g in self.groups]}

    @property
    def n_strata(self) -> int:
        return sum(g.n_strata for g in self.groups)

    def kernel(self) -> ModelKernel:
        if self.model == "poisson_sizes":
            return PoissonStratumKernel()
        kappas = {g.kappa for g in self.groups}
        return BinomialStratumKernel(kappas.pop() if len(kappas) == 1 else None)


def true_eta(spec: PopulationSpec) -> float:
    """Stratum-weighted mean of the expected trait proportions."""
    total = spec.n_strata
    return sum(g.n_strata * g.p.mean for g in spec.groups) / total


@dataclass(frozen=True)
class Population:
    """Per-stratum (size parameter, p) and, for binomial sizes, kappa."""

    model: str
    params: np.ndarray
    kappa: np.ndarray | None = None


def draw_population(spec: PopulationSpec, rng: np.random.Generator) -> Population:
    params, kappas = [], []
    for g in spec.groups:
        size = g.size.draw(g.n_strata, rng)
        p = g.p.draw(g.n_strata, rng)
        params.append(np.column_stack([size, p]))
        kappas.append(np.full(g.n_strata, g.kappa if g.kappa is not None else 0, dtype=np.int64))
    kappa = np.concatenate(kappas) if spec.model == "binomial_sizes" else None
    return Population(spec.model, np.vstack(params), kappa)


def draw_observations(population: Population, rng: np.random.Generator) -> np.ndarray:
    """(x, k) per stratum: k from the size law first, then x | k ~ B(k, p)."""
    size, p = population.params[:, 0], population.params[:, 1]
    if population.model == "poisson_sizes":
        k = rng.poisson(size)
    else:
        k = rng.binomial(population.kappa, size)
    x = rng.binomial(k, p)
    return np.column_stack([x, k]).astype(np.int64)


def binomial_thin(data, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each sampled individual independently with probability ``gamma``.

    Successes and failures are thinned separately, so Poisson(lambda) sizes
    become Poisson(gamma * lambda) sizes with the same p.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("retain probability must lie in [0, 1]")
    arr = np.asarray(data, dtype=np.int64).reshape(-1, 2)
    x = rng.binomial(arr[:, 0], gamma)
    fails = rng.binomial(arr[:, 1] - arr[:, 0], gamma)
    return np.column_stack([x, x + fails])


# --------------------------------------------------------------------------
# campaigns
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    axes: tuple[tuple[float, float, int], ...]

    @classmethod
    def default(cls, model: str) -> "GridConfig":
        if model == "poisson_sizes":
            return cls(((0.02, 6.0, 40), (0.02, 6.0, 40)))
        return cls(((0.0, 1.0, 40), (0.0, 1.0, 40)))

    @classmethod
    def parse(cls, axes) -> "GridConfig":
        return cls(tuple((float(lo), float(hi), int(n)) for lo, hi, n in axes))

    def build(self) -> ParameterGrid:
        return build_product_grid(self.axes)


@dataclass(frozen=True)
class EstimatorSummary:
    mean: float
    sd: float
    undefined: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "undefined": self.undefined}


@dataclass(eq=False)
class SimResult:
    summaries: dict[str, EstimatorSummary]
    replications: int
    seed: int
    true_eta: float
    values: dict[str, list]
    label: str = ""
    mean_empty_strata: float = 0.0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "seed": self.seed,
            "replications": self.replications,
            "true_eta": self.true_eta,
            "mean_empty_strata": self.mean_empty_strata,
            "estimators": {k: v.to_dict() for k, v in self.summaries.items()},
            "replicates": self.values,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def summarize(values: Sequence) -> EstimatorSummary:
    defined = np.array([v for v in values if v is not None], dtype=float)
    undefined = len(values) - len(defined)
    if len(defined) == 0:
        return EstimatorSummary(float("nan"), float("nan"), undefined)
    sd = float(np.std(defined, ddof=1)) if len(defined) > 1 else 0.0
    return EstimatorSummary(float(np.mean(defined)), sd, undefined)


def run_replication(
    spec: PopulationSpec,
    grid: ParameterGrid,
    em_config: EmConfig,
    rng: np.random.Generator,
    naive_skip_empty: bool = True,
) -> dict:
    population = draw_population(spec, rng)
    data = draw_observations(population, rng)
    kernel = spec.kernel()
    if isinstance(kernel, BinomialStratumKernel) and kernel.kappa is None:
        data = np.column_stack([data, population.kappa])
    est = estimate_all(kernel, data, grid, em_config, naive_skip_empty=naive_skip_empty)
    return {
        "naive": est.naive if is_defined(est.naive) else None,
        "extreme_collapse": est.extreme_collapse if is_defined(est.extreme_collapse) else None,
        "gmle": est.gmle,
        "empty_strata": est.empty_strata,
    }


def run_campaign(
    spec: PopulationSpec,
    grid_config: GridConfig | None = None,
    em_config: EmConfig = EmConfig(),
    replications: int = 50,
    seed: int = 0,
    workers: int = 1,
    naive_skip_empty: bool = True,
    label: str = "",
) -> SimResult:
    """Run ``replications`` independent draws and tabulate every estimator.

    With ``naive_skip_empty`` the naive estimator averages over non-empty
    strata; otherwise it is undefined whenever a stratum is empty and such
    replications are left out of its mean and counted.
    """
    if replications < 1:
        raise ValueError("replications must be at least 1")
    grid = (grid_config or GridConfig.default(spec.model)).build()
    rngs = replication_rngs(seed, replications)

    def one(r: int) -> dict:
        try:
            return run_replication(spec, grid, em_config, rngs[r], naive_skip_empty)
        except Exception as exc:
            raise RuntimeError(f"replication {r} failed: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(replications)))
    else:
        rows = [one(r) for r in range(replications)]

    values = {name: [row[name] for row in rows] for name in ESTIMATORS}
    return SimResult(
        summaries={name: summarize(values[name]) for name in ESTIMATORS},
        replications=replications,
        seed=seed,
        true_eta=true_eta(spec),
        values=values,
        label=label,
        mean_empty_strata=float(np.mean([row["empty_strata"] for row in rows])),
    )


def format_table(results: Sequence[SimResult], title: str = "", estimators=("naive", "gmle")) -> str:
    """Aligned plain-text table with one 'mean, (sd)' column per estimator."""
    headers = ["case"] + list(estimators)
    body = []
    for res in results:
        cells = [res.label]
        for name in estimators:
            s = res.summaries[name]
            cell = f"{s.mean:.3f}, ({s.sd:.3f})"
            if s.undefined:
                cell += f" [{s.undefined} undefined]"
            cells.append(cell)
        body.append(cells)
    widths = [max(len(r[i]) for r in [headers] + body) for i in range(len(headers))]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(headers, widths)))
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# campaign files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CampaignConfig:
    name: str
    model: str
    rows: tuple[tuple[str, PopulationSpec], ...]
    replications: int = 50
    seed: int = 0
    grid: GridConfig | None = None
    em: EmConfig = field(default_factory=EmConfig)
    naive_skip_empty: bool = True

    @classmethod
    def from_dict(cls, payload: dict) -> "CampaignConfig":
        model = payload["model"]
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")
        rows = tuple(
            (str(row.get("label", i)), PopulationSpec.from_dict(model, row["groups"]))
            for i, row in enumerate(payload["rows"])
        )
        em = payload.get("em", {})
        grid = payload.get("grid")
        naive = payload.get("naive_empty", "skip")
        if naive not in ("skip", "strict"):
            raise ValueError("naive_empty must be 'skip' or 'strict'")
        return cls(
            name=str(payload.get("name", "campaign")),
            model=model,
            rows=rows,
            replications=int(payload.get("replications", 50)),
            seed=int(payload.get("seed", 0)),
            grid=GridConfig.parse(grid["axes"]) if grid else None,
            em=EmConfig(int(em.get("max_iters", 1000)), float(em.get("stop_tol", 0.0))),
            naive_skip_empty=naive == "skip",
        )

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def run_config(config: CampaignConfig, workers: int = 1, replications: int | None = None, seed: int | None = None) -> list[SimResult]:
    reps = config.replications if replications is None else replications
    base = config.seed if seed is None else seed
    out = []
    for i, (label, spec) in enumerate(config.rows):
        # each row gets its own stream family so rows can be rerun alone
        row_seed = int(np.random.SeedSequence([base, i]).generate_state(1)[0])
        res = run_campaign(spec, config.grid, config.em, reps, row_seed, workers, config.naive_skip_empty, label)
        out.append(res)
    return out


# --------------------------------------------------------------------------
# weak convergence probe
# --------------------------------------------------------------------------


def probe_functionals(model: str, eps: float = 0.05) -> dict:
    """Bounded test functions on the grid's compact range, keyed by name."""

    def prop(a):
        if model == "poisson_sizes":
            lam = a[:, 0] + a[:, 1]
            return np.where(lam > 0, a[:, 0] / (lam + eps), 0.0)
        return a[:, 1]

    return {
        "mean_1": lambda a: a[:, 0],
        "mean_2": lambda a: a[:, 1],
        "second_moment_1": lambda a: a[:, 0] ** 2,
        "second_moment_2": lambda a: a[:, 1] ** 2,
        "proportion": prop,
    }


@dataclass(frozen=True)
class ProbePoint:
    n: int
    discrepancy: float
    by_functional: dict

    @property
    def mean_discrepancy(self) -> float:
        return max(self.by_functional["mean_1"], self.by_functional["mean_2"])


def weak_convergence_probe(
    fixed_thetas: Sequence[Sequence[float]],
    model: str,
    grid_config: GridConfig | None,
    n_schedule: Sequence[int],
    rng: np.random.Generator,
    em_config: EmConfig = EmConfig(),
    kappa: int | None = None,
) -> list[ProbePoint]:
    """Distance between the fitted and the empirical mixing law as n grows.

    The size-n array cycles through ``fixed_thetas``; thetas are (xi1, xi2)
    for Poisson sizes and (pi, p) for binomial sizes.  For each n one
    observation is drawn per theta, the grid GMLE is fitted, and the largest
    gap over ``probe_functionals`` between the fit and the empirical law of
    the thetas is recorded.
    """
    thetas = np.asarray(fixed_thetas, dtype=float).reshape(-1, 2)
    if len(thetas) == 0:
        raise ValueError("need at least one theta")
    if model == "poisson_sizes":
        kernel: ModelKernel = PoissonStratumKernel()
    elif model == "binomial_sizes":
        if kappa is None:
            raise ValueError("binomial sizes need kappa")
        kernel = BinomialStratumKernel(kappa)
    else:
        raise ValueError(f"unknown model {model!r}")
    grid = (grid_config or GridConfig.default(model)).build()
    tests = probe_functionals(model)
    out = []
    for n in n_schedule:
        theta_n = thetas[np.arange(n) % len(thetas)]
        if model == "poisson_sizes":
            x = rng.poisson(theta_n[:, 0])
            k = x + rng.poisson(theta_n[:, 1])
        else:
            k = rng.binomial(kappa, theta_n[:, 0])
            x = rng.binomial(k, theta_n[:, 1])
        L = build_likelihood_matrix(kernel, np.column_stack([x, k]), grid)
        w = em_fit(L, max_iters=em_config.max_iters, stop_tol=em_config.stop_tol).weights.weights
        gaps = {name: abs(float(w @ f(grid.atoms)) - float(np.mean(f(theta_n)))) for name, f in tests.items()}
        out.append(ProbePoint(int(n), max(gaps.values()), gaps))
    return out
