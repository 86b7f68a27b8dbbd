"""Sampling kernels f(y | theta) and the proportion functional.

Every kernel is evaluated in log space.  The scalar functions
(``poisson_stratum_kernel`` and friends) evaluate one observation at one
parameter point; the kernel classes evaluate a whole batch of observations
against a whole grid of atoms and are what the EM solver consumes.

Conventions shared by all kernels: ``0 ** 0 == 1`` (so boundary atoms such
as ``p = 0`` or ``pi = 1`` are legal mixture support) and ``Pois(0; 0) == 1``.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class PoissonStratumParam(NamedTuple):
    """Rates of the independent success/failure Poisson counts of one stratum."""

    xi1: float
    xi2: float

    @property
    def lam(self) -> float:
        return self.xi1 + self.xi2

    @property
    def p(self) -> float:
        if self.lam <= 0:
            raise ValueError("p is not recoverable when xi1 + xi2 == 0")
        return self.xi1 / self.lam

    @classmethod
    def from_lambda_p(cls, lam: float, p: float) -> "PoissonStratumParam":
        return cls(p * lam, (1.0 - p) * lam)


class BinomialStratumParam(NamedTuple):
    """Response probability ``pi`` and trait proportion ``p`` of one stratum."""

    pi: float
    p: float


class CountObservation(NamedTuple):
    x: int
    k: int


class TruncatedInterviewObservation(NamedTuple):
    """Outcome of up to ``kappa0`` interview attempts.

    ``z`` is the answer bit and ``kappa`` the attempt that got it; both are
    ``None`` for a NULL outcome (no response in ``kappa0`` attempts).
    """

    z: int | None
    kappa: int | None

    @property
    def is_null(self) -> bool:
        return self.kappa is None


NULL = TruncatedInterviewObservation(None, None)


# --------------------------------------------------------------------------
# validation helpers
# --------------------------------------------------------------------------


def _check_counts(x: np.ndarray, k: np.ndarray) -> None:
    if np.any(x < 0) or np.any(k < 0):
        raise ValueError("counts must be nonnegative")
    if np.any(x > k):
        bad = int(np.flatnonzero(x > k)[0])
        raise ValueError(f"observation {bad}: x={x[bad]} exceeds k={k[bad]}")


def _check_unit(values: np.ndarray, name: str) -> None:
    if np.any(~np.isfinite(values)) or np.any(values < 0) or np.any(values > 1):
        raise ValueError(f"{name} must lie in [0, 1]")


def as_count_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x, k)`` integer arrays from count observations or an (n, 2) array."""
    arr = np.asarray(data, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("count data must have shape (n, 2) of (x, k) pairs")
    x, k = arr[:, 0], arr[:, 1]
    _check_counts(x, k)
    return x, k


# --------------------------------------------------------------------------
# vectorized log kernels; observations broadcast against atoms
# --------------------------------------------------------------------------


def log_poisson_pmf(w, xi):
    return xlogy(w, xi) - xi - gammaln(np.asarray(w, dtype=float) + 1.0)


def log_binom_coef(n, k):
    n = np.asarray(n, dtype=float)
    k = np.asarray(k, dtype=float)
    return gammaln(n + 1.0) - gammaln(k + 1.0) - gammaln(n - k + 1.0)


def log_binomial_pmf(k, n, prob):
    return log_binom_coef(n, k) + xlogy(k, prob) + xlog1py(np.asarray(n) - k, -prob)


# --------------------------------------------------------------------------
# scalar kernels
# --------------------------------------------------------------------------


def poisson_stratum_kernel(obs: CountObservation, param: PoissonStratumParam) -> float:
    """Pois(x; xi1) * Pois(k - x; xi2)."""
    x, k = int(obs[0]), int(obs[1])
    _check_counts(np.array([x]), np.array([k]))
    xi1, xi2 = float(param[0]), float(param[1])
    if not (xi1 >= 0 and xi2 >= 0 and math.isfinite(xi1) and math.isfinite(xi2)):
        raise ValueError("Poisson rates must be finite and nonnegative")
    return float(np.exp(log_poisson_pmf(x, xi1) + log_poisson_pmf(k - x, xi2)))


def binomial_stratum_kernel(obs: CountObservation, param: BinomialStratumParam, kappa: int) -> float:
    """B(k; kappa, pi) * B(x; k, p)."""
    x, k = int(obs[0]), int(obs[1])
    _check_counts(np.array([x]), np.array([k]))
    if k > kappa:
        raise ValueError(f"observation has k={k} responses but only kappa={kappa} were sampled")
    pi, p = float(param[0]), float(param[1])
    _check_unit(np.array([pi, p]), "(pi, p)")
    return float(np.exp(log_binomial_pmf(k, kappa, pi) + log_binomial_pmf(x, k, p)))


def truncated_geometric_kernel(
    obs: TruncatedInterviewObservation, param: BinomialStratumParam, kappa0: int
) -> float:
    pi, p = float(param[0]), float(param[1])
    _check_unit(np.array([pi, p]), "(pi, p)")
    if obs.is_null:
        return float(np.exp(xlog1py(kappa0, -pi)))
    z, kappa = int(obs.z), int(obs.kappa)
    if z not in (0, 1) or not 1 <= kappa <= kappa0:
        raise ValueError(f"answered outcome needs z in {{0,1}} and 1 <= kappa <= {kappa0}")
    logv = xlog1py(kappa - 1, -pi) + xlogy(1, pi) + xlogy(z, p) + xlog1py(1 - z, -p)
    return float(np.exp(logv))


def expfam_kernel(family: str, y: float, atom: float) -> float:
    kern = ExpFamKernel(family)
    kern.check_atoms(np.array([[atom]], dtype=float))
    return float(np.exp(kern.log_matrix(np.array([y], dtype=float), np.array([[atom]]))[0, 0]))


def eta_proportion(param, eps: float = 0.0) -> float:
    """Trait proportion of a stratum parameter.

    ``BinomialStratumParam`` projects onto ``p``.  For ``PoissonStratumParam``
    the proportion is ``xi1 / (xi1 + xi2 + eps)`` and 0 at the origin.
    """
    if isinstance(param, BinomialStratumParam):
        return float(param.p)
    xi1, xi2 = float(param[0]), float(param[1])
    lam = xi1 + xi2
    return xi1 / (lam + eps) if lam > 0 else 0.0


# --------------------------------------------------------------------------
# batch kernels
# --------------------------------------------------------------------------


class ModelKernel:
    """Base for batch kernels.

    Subclasses implement ``observations`` (coerce user data to an array with
    one row per observation), ``log_matrix`` (n x m log-likelihoods) and
    ``eta`` (the proportion functional at every atom).
    """

    name = "abstract"
    param_dim = 0
    discrete = True

    def observations(self, data) -> np.ndarray:
        raise NotImplementedError

    def log_matrix(self, obs: np.ndarray, atoms: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_atoms(self, atoms: np.ndarray) -> None:
        pass

    def eta(self, atoms: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matrix(self, obs: np.ndarray, atoms: np.ndarray) -> np.ndarray:
        return np.exp(self.log_matrix(obs, atoms))

    def describe(self) -> dict:
        return {"model": self.name}


class PoissonStratumKernel(ModelKernel):
    """Model (ii): K ~ Poisson(lambda), X | K ~ B(K, p), atoms are (xi1, xi2)."""

    name = "poisson"
    param_dim = 2

    def __init__(self, eps: float = 0.0):
        self.eps = eps

    def observations(self, data) -> np.ndarray:
        x, k = as_count_arrays(data)
        return np.column_stack([x, k])

    def check_atoms(self, atoms):
        if atoms.shape[1] != 2 or np.any(atoms < 0) or not np.all(np.isfinite(atoms)):
            raise ValueError("Poisson atoms must be finite nonnegative (xi1, xi2) pairs")

    def log_matrix(self, obs, atoms):
        x = obs[:, 0:1].astype(float)
        w2 = (obs[:, 1:2] - obs[:, 0:1]).astype(float)
        return log_poisson_pmf(x, atoms[None, :, 0]) + log_poisson_pmf(w2, atoms[None, :, 1])

    def eta(self, atoms):
        lam = atoms[:, 0] + atoms[:, 1]
        out = np.zeros(len(atoms))
        pos = lam > 0
        out[pos] = atoms[pos, 0] / (lam[pos] + self.eps)
        return out

    def describe(self):
        return {"model": self.name, "eps": self.eps}


class BinomialStratumKernel(ModelKernel):
    """Model (i): K ~ B(kappa, pi), X | K ~ B(K, p), atoms are (pi, p).

    ``kappa`` is either a single design constant or one value per
    observation, in which case ``observations`` expects (x, k, kappa) rows.
    """

    name = "binomial"
    param_dim = 2

    def __init__(self, kappa: int | None = None):
        if kappa is not None and kappa < 1:
            raise ValueError("kappa must be a positive integer")
        self.kappa = kappa

    def observations(self, data) -> np.ndarray:
        arr = np.asarray(data, dtype=np.int64)
        if arr.ndim == 2 and arr.shape[1] == 3:
            x, k, kap = arr[:, 0], arr[:, 1], arr[:, 2]
            _check_counts(x, k)
        else:
            if self.kappa is None:
                raise ValueError("per-observation kappa required when the kernel has no fixed kappa")
            x, k = as_count_arrays(arr)
            kap = np.full_like(k, self.kappa)
        if np.any(kap < 1):
            raise ValueError("kappa must be a positive integer")
        if np.any(k > kap):
            bad = int(np.flatnonzero(k > kap)[0])
            raise ValueError(f"observation {bad}: k={k[bad]} exceeds kappa={kap[bad]}")
        return np.column_stack([x, k, kap])

    def check_atoms(self, atoms):
        if atoms.shape[1] != 2:
            raise ValueError("binomial atoms must be (pi, p) pairs")
        _check_unit(atoms, "(pi, p) atoms")

    def log_matrix(self, obs, atoms):
        x, k, kap = (obs[:, i : i + 1] for i in range(3))
        return log_binomial_pmf(k, kap, atoms[None, :, 0]) + log_binomial_pmf(x, k, atoms[None, :, 1])

    def eta(self, atoms):
        return atoms[:, 1].astype(float).copy()

    def describe(self):
        return {"model": self.name, "kappa": self.kappa}


class TruncatedGeometricKernel(ModelKernel):
    """Up to ``kappa0`` interview attempts, each answered with probability ``pi``.

    With ``conditional=True`` the kernel is the distribution of an answered
    outcome given that a response happened at all, which is what a fit on
    responders only (the truncated case) needs.  At ``pi == 0`` the
    conditional kernel takes its limit ``1 / kappa0``.

    Observation rows are ``(z, kappa)`` with ``kappa == 0`` encoding NULL.
    """

    name = "truncated_geometric"
    param_dim = 2

    def __init__(self, kappa0: int, conditional: bool = False):
        if kappa0 < 1:
            raise ValueError("kappa0 must be a positive integer")
        self.kappa0 = kappa0
        self.conditional = conditional

    def observations(self, data) -> np.ndarray:
        rows = []
        for i, obs in enumerate(data):
            z, kappa = obs
            if kappa is None or kappa == 0:
                if self.conditional:
                    raise ValueError(f"observation {i}: NULL outcome in a responders-only fit")
                rows.append((0, 0))
                continue
            if z not in (0, 1) or not 1 <= kappa <= self.kappa0:
                raise ValueError(f"observation {i}: need z in {{0,1}} and 1 <= kappa <= {self.kappa0}")
            rows.append((int(z), int(kappa)))
        return np.array(rows, dtype=np.int64).reshape(-1, 2)

    def check_atoms(self, atoms):
        _check_unit(atoms, "(pi, p) atoms")

    def log_response_prob(self, pi: np.ndarray) -> np.ndarray:
        """log P(kappa <= kappa0) = log(1 - (1 - pi)^kappa0)."""
        with np.errstate(divide="ignore"):
            return np.log(-np.expm1(xlog1py(self.kappa0, -pi)))

    def log_matrix(self, obs, atoms):
        pi = atoms[None, :, 0]
        p = atoms[None, :, 1]
        z = obs[:, 0:1].astype(float)
        kap = obs[:, 1:2].astype(float)
        null = kap == 0
        with np.errstate(divide="ignore"):
            answered = xlog1py(np.maximum(kap - 1, 0), -pi) + np.log(pi) + xlogy(z, p) + xlog1py(1 - z, -p)
        if self.conditional:
            at_zero = pi == 0
            with np.errstate(invalid="ignore"):
                answered = answered - self.log_response_prob(pi)
            limit = -math.log(self.kappa0) + xlogy(z, p) + xlog1py(1 - z, -p)
            answered = np.where(at_zero, limit, answered)
            return answered
        return np.where(null, xlog1py(self.kappa0, -pi), answered)

    def eta(self, atoms):
        return atoms[:, 1].astype(float).copy()

    def describe(self):
        return {"model": self.name, "kappa0": self.kappa0, "conditional": self.conditional}


EXPFAM_FAMILIES = ("normal_unit_variance", "poisson", "bernoulli")


class ExpFamKernel(ModelKernel):
    """One-parameter exponential families in their mean parametrization."""

    param_dim = 1

    def __init__(self, family: str):
        if family not in EXPFAM_FAMILIES:
            raise ValueError(f"unknown family {family!r}; expected one of {EXPFAM_FAMILIES}")
        self.family = family
        self.name = f"expfam_{family}"
        self.discrete = family != "normal_unit_variance"

    def observations(self, data) -> np.ndarray:
        y = np.asarray(data, dtype=float).reshape(-1)
        if self.family == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise ValueError("Poisson observations must be nonnegative integers")
        if self.family == "bernoulli" and np.any((y != 0) & (y != 1)):
            raise ValueError("Bernoulli observations must be 0 or 1")
        return y.reshape(-1, 1)

    def check_atoms(self, atoms):
        mu = np.asarray(atoms, dtype=float).reshape(-1)
        if not np.all(np.isfinite(mu)):
            raise ValueError("atoms must be finite")
        if self.family == "poisson" and np.any(mu < 0):
            raise ValueError("Poisson mean atoms must be nonnegative")
        if self.family == "bernoulli" and (np.any(mu < 0) or np.any(mu > 1)):
            raise ValueError("Bernoulli mean atoms must lie in [0, 1]")

    def log_matrix(self, obs, atoms):
        y = np.asarray(obs, dtype=float).reshape(-1, 1)
        mu = np.asarray(atoms, dtype=float).reshape(1, -1)
        if self.family == "normal_unit_variance":
            return -0.5 * (y - mu) ** 2 - LOG_SQRT_2PI
        if self.family == "poisson":
            return log_poisson_pmf(y, mu)
        return xlogy(y, mu) + xlog1py(1.0 - y, -mu)

    def eta(self, atoms):
        return np.asarray(atoms, dtype=float).reshape(len(atoms), -1)[:, 0].copy()

    def describe(self):
        return {"model": self.name}


def make_kernel(name: str, **kwargs) -> ModelKernel:
    """Construct a kernel from its CLI/config name."""
    if name in ("poisson", "poisson_sizes"):
        return PoissonStratumKernel(eps=kwargs.get("eps", 0.0))
    if name in ("binomial", "binomial_sizes"):
        return BinomialStratumKernel(kappa=kwargs.get("kappa"))
    if name == "truncated_geometric":
        return TruncatedGeometricKernel(kwargs["kappa0"], kwargs.get("conditional", False))
    if name.startswith("expfam_"):
        return ExpFamKernel(name[len("expfam_"):])
    raise ValueError(f"unknown model {name!r}")


def sample_space_counts(kappa: int) -> Sequence[tuple[int, int]]:
    """All (x, k) outcomes of Model (i) with ``kappa`` sampled subjects."""
    return [(x, k) for k in range(kappa + 1) for x in range(k + 1)]
