"""Exact optimal-transport references for checking trained maps.

Discrete problems are solved exactly: by an assignment solver when both
marginals are uniform with equal support size, otherwise by a linear
program.  One-dimensional problems use the monotone rearrangement
``F_Q^-1 o F_P``, which is optimal for any convex cost of ``|y - x|``.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from typing import Callable

import numpy as np
from scipy import integrate, optimize, stats
from scipy.spatial.distance import cdist

from .errors import ContractViolation, NumericError

log = logging.getLogger(__name__)

MAX_SUPPORT = 64


@dataclasses.dataclass
class DiscreteDistribution:
    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.weights = np.asarray(self.weights, dtype=float)
        validate_weights(self.weights, "weights")
        if len(self.weights) != len(self.points):
            raise ContractViolation("one weight per support point required")

    @classmethod
    def uniform(cls, points) -> "DiscreteDistribution":
        points = np.asarray(points, dtype=float)
        return cls(points, np.full(len(points), 1.0 / len(points)))


def validate_weights(w: np.ndarray, name: str) -> None:
    if w.ndim != 1 or len(w) == 0:
        raise ContractViolation(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ContractViolation(f"{name} must be finite and nonnegative")
    if abs(w.sum() - 1.0) > 1e-12:
        raise ContractViolation(f"{name} sum to {w.sum()!r}, not 1")


@dataclasses.dataclass
class TransportPlan:
    matrix: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        m = self.matrix
        if m.shape != (len(self.mu), len(self.nu)):
            raise ContractViolation(f"plan shape {m.shape} does not match marginals")
        if np.any(m < -1e-12):
            raise ContractViolation("plan has negative mass")
        if np.abs(m.sum(1) - self.mu).max() > 1e-9 or np.abs(m.sum(0) - self.nu).max() > 1e-9:
            raise ContractViolation("plan marginals violate the constraints")

    def cost(self, cost_matrix: np.ndarray) -> float:
        return float((self.matrix * cost_matrix).sum())


@dataclasses.dataclass
class KPSolution:
    plan: TransportPlan
    cost: float
    permutation: np.ndarray | None = None


def solve_kp_discrete(cost_matrix, mu, nu) -> KPSolution:
    """Exact discrete Kantorovich problem."""
    c = np.asarray(cost_matrix, dtype=float)
    mu, nu = np.asarray(mu, dtype=float), np.asarray(nu, dtype=float)
    if c.ndim != 2 or c.shape != (len(mu), len(nu)):
        raise ContractViolation(f"cost shape {c.shape} does not match marginals {len(mu)}x{len(nu)}")
    if max(c.shape) > MAX_SUPPORT:
        raise ContractViolation(f"support sizes above {MAX_SUPPORT} are out of scope")
    if not np.all(np.isfinite(c)):
        raise ContractViolation("cost matrix must be finite")
    validate_weights(mu, "mu")
    validate_weights(nu, "nu")
    n, m = c.shape
    if n == m and np.all(mu == mu[0]) and np.all(nu == nu[0]):
        rows, perm = optimize.linear_sum_assignment(c)
        plan = np.zeros_like(c)
        plan[rows, perm] = mu
        cost = sum(c[i, perm[i]] for i in range(n)) / n
        return KPSolution(TransportPlan(plan, mu, nu), float(cost), perm)
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = optimize.linprog(c.ravel(), A_eq=a_eq, b_eq=np.concatenate([mu, nu]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise ContractViolation(f"transport LP failed: {res.message}")
    plan = np.clip(res.x.reshape(n, m), 0.0, None)
    return KPSolution(TransportPlan(plan, mu, nu), float((plan * c).sum()))


def permutation_cost(cost_matrix: np.ndarray, perm) -> float:
    n = len(perm)
    return sum(cost_matrix[i, perm[i]] for i in range(n)) / n


# ------------------------------------------------------------------ 1-D


class Gaussian1D:
    def __init__(self, mean: float, std: float):
        if std <= 0:
            raise ContractViolation("std must be > 0")
        self.mean, self.std = float(mean), float(std)
        self._dist = stats.norm(self.mean, self.std)

    def cdf(self, y):
        return self._dist.cdf(y)

    def ppf(self, u):
        return self._dist.ppf(u)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, self.std, n)


class Empirical1D:
    """Uniform weights on a finite sample; quantile function is a step function."""

    def __init__(self, samples):
        s = np.sort(np.asarray(samples, dtype=float).ravel())
        if len(s) == 0:
            raise ContractViolation("empirical distribution needs samples")
        self.support = s

    def cdf(self, y):
        return np.searchsorted(self.support, y, side="right") / len(self.support)

    def ppf(self, u):
        n = len(self.support)
        idx = np.clip(np.ceil(np.asarray(u) * n).astype(int) - 1, 0, n - 1)
        return self.support[idx]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.support, size=n)


@dataclasses.dataclass
class MonotoneMap:
    source: object
    target: object
    cost: float
    abs_error: float

    def __call__(self, y):
        if isinstance(self.source, Empirical1D):
            # rank-based: i-th order statistic goes to the matching quantile
            u = (np.searchsorted(self.source.support, y, side="left") + 0.5) / len(self.source.support)
        else:
            u = self.source.cdf(y)
        return self.target.ppf(u)


def monotone_map_1d(p, q, tol: float = 1e-9) -> MonotoneMap:
    """Monotone rearrangement and its cost  int_0^1 |F_P^-1(u) - F_Q^-1(u)| du."""
    if isinstance(p, Empirical1D) and isinstance(q, Empirical1D):
        # both quantile functions are steps; integrate exactly between breakpoints
        knots = np.union1d(np.arange(len(p.support) + 1) / len(p.support), np.arange(len(q.support) + 1) / len(q.support))
        mid = 0.5 * (knots[1:] + knots[:-1])
        cost = float(np.sum(np.diff(knots) * np.abs(p.ppf(mid) - q.ppf(mid))))
        return MonotoneMap(p, q, cost, 0.0)
    f = lambda u: abs(float(p.ppf(u)) - float(q.ppf(u)))
    with warnings.catch_warnings():
        # convergence is judged from the returned error estimate below
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(f, 0.0, 1.0, epsabs=tol, epsrel=tol, limit=500)
    if not np.isfinite(val) or err > max(1e3 * tol, 1e-6):
        raise NumericError(f"quadrature did not converge: estimate {val}, achieved tolerance {err}")
    return MonotoneMap(p, q, float(val), float(err))


# ------------------------------------------------------------------ saddle check


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E|X-Y| - E|X-X'| - E|Y-Y'| with Euclidean norms (V-statistic)."""
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    if a.shape[1] == 1:
        return float(stats.energy_distance(a[:, 0], b[:, 0]) ** 2)
    return float(2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean())


@dataclasses.dataclass
class SaddleReport:
    primal_cost: float
    dual_value: float
    oracle_cost: float
    gap: float
    relative_gap: float
    pushforward_energy: float
    primal_stderr: float
    flagged: bool

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def verify_saddle(
    transport: Callable,
    potential: Callable,
    p_sampler: Callable,
    q_sampler: Callable,
    cost: Callable,
    oracle_cost: float,
    n: int = 20000,
    rng: np.random.Generator | None = None,
    tol: float = 0.01,
) -> SaddleReport:
    """Monte-Carlo primal/dual values of a trained (map, potential) pair.

    ``p_sampler(rng, n)`` and ``q_sampler(rng, n)`` draw samples; ``cost``
    maps (y, T(y)) to per-sample costs.  The report is flagged when the
    primal estimate's standard error exceeds ``tol`` relative to the oracle.
    """
    rng = rng or np.random.default_rng(0)
    y = p_sampler(rng, n)
    x = q_sampler(rng, n)
    ty = transport(y)
    c = np.asarray(cost(y, ty), dtype=float)
    primal = float(c.mean())
    dual = float(np.mean(potential(x)) + np.mean(c - np.asarray(potential(ty)).ravel()))
    stderr = float(c.std(ddof=1) / np.sqrt(n)) if n > 1 else np.inf
    flagged = bool(stderr > tol * abs(oracle_cost)) if oracle_cost else bool(stderr > tol)
    if flagged:
        log.warning("verify_saddle: %d samples give standard error %.3g, above the requested tolerance", n, stderr)
    m = min(n, 2000)
    ed = energy_distance(ty[:m], x[:m])
    gap = primal - oracle_cost
    rel = gap / abs(oracle_cost) if oracle_cost else gap
    return SaddleReport(primal, dual, float(oracle_cost), float(gap), float(rel), ed, stderr, flagged)
