"""Cluster distributions for the branching dynamics.

A cluster is the point process of offspring displacements that replaces one
particle after a unit time step.  Two families are supported:

* ``IIDCluster``: an offspring count drawn from a closed-form count law,
  displacements i.i.d. from a closed-form displacement law.
* ``UnitTimeBBM``: the leaves of a rate-1 binary splitting tree run for one
  unit of time, each line following a Brownian motion with constant drift.

All laws are restricted to families whose moment generating function is
available in closed form, so the log-Laplace transform of the cluster
intensity is exact.  That exactness is what the downstream root finding and
large-deviation machinery rely on.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp


class InvalidModelError(ValueError):
    """A cluster model violates one of its construction invariants."""


class PopulationCapError(RuntimeError):
    """A branching step would exceed the configured population cap."""


# --------------------------------------------------------------------------
# Offspring count laws (finite mean and finite second moment by construction)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    """Deterministic offspring count."""

    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise InvalidModelError(f"Fixed count must be a nonnegative integer, got {self.k}")

    @property
    def mean(self) -> float:
        return float(self.k)

    @property
    def second_moment(self) -> float:
        return float(self.k) ** 2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.full(size, self.k, dtype=np.int64)


@dataclass(frozen=True)
class PoissonCount:
    """Poisson offspring count with mean ``m``."""

    m: float

    def __post_init__(self):
        if not (self.m > 0 and math.isfinite(self.m)):
            raise InvalidModelError(f"Poisson count mean must be positive and finite, got {self.m}")

    @property
    def mean(self) -> float:
        return self.m

    @property
    def second_moment(self) -> float:
        return self.m + self.m**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.poisson(self.m, size=size).astype(np.int64)


@dataclass(frozen=True)
class GeometricCount:
    """Geometric offspring count on {0, 1, 2, ...}: P[N = k] = p (1-p)^k."""

    p: float

    def __post_init__(self):
        if not (0 < self.p <= 1):
            raise InvalidModelError(f"Geometric parameter must lie in (0, 1], got {self.p}")

    @property
    def mean(self) -> float:
        return (1 - self.p) / self.p

    @property
    def second_moment(self) -> float:
        q = 1 - self.p
        return q * (1 + q) / self.p**2

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        # numpy's geometric lives on {1, 2, ...}
        return rng.geometric(self.p, size=size).astype(np.int64) - 1


CountLaw = Union[Fixed, PoissonCount, GeometricCount]


# --------------------------------------------------------------------------
# Displacement laws
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Gaussian:
    """Normal displacement with mean ``mu`` and variance ``var``."""

    mu: float
    var: float

    def __post_init__(self):
        if not (self.var > 0 and math.isfinite(self.var) and math.isfinite(self.mu)):
            raise InvalidModelError(f"Gaussian needs finite mean and positive variance, got {self}")

    def sample(self, rng, size):
        return self.mu + math.sqrt(self.var) * rng.standard_normal(size)

    def log_mgf(self, t):
        return self.mu * t + 0.5 * self.var * np.square(t)

    def log_mgf_prime(self, t):
        return self.mu + self.var * t

    @property
    def support(self):
        return (-math.inf, math.inf)

    def boundary_log_prob(self, upper: bool) -> float:
        raise InvalidModelError("Gaussian support is unbounded")

    def negated(self) -> "Gaussian":
        return Gaussian(-self.mu, self.var)


@dataclass(frozen=True)
class TwoPoint:
    """Displacement equal to ``a`` with probability ``p``, else ``b``."""

    a: float
    b: float
    p: float

    def __post_init__(self):
        if not (0 < self.p < 1):
            raise InvalidModelError(f"TwoPoint probability must lie in (0, 1), got {self.p}")
        if self.a == self.b or not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise InvalidModelError(f"TwoPoint needs two distinct finite values, got {self}")

    def _atoms(self):
        return np.array([self.a, self.b]), np.array([self.p, 1 - self.p])

    def sample(self, rng, size):
        vals, probs = self._atoms()
        return rng.choice(vals, p=probs, size=size)

    def log_mgf(self, t):
        vals, probs = self._atoms()
        t = np.asarray(t, dtype=float)
        return logsumexp(np.log(probs) + np.multiply.outer(t, vals), axis=-1)

    def log_mgf_prime(self, t):
        vals, probs = self._atoms()
        t = np.asarray(t, dtype=float)
        logw = np.log(probs) + np.multiply.outer(t, vals)
        logw -= logsumexp(logw, axis=-1, keepdims=True)
        return np.exp(logw) @ vals

    @property
    def support(self):
        return (min(self.a, self.b), max(self.a, self.b))

    def boundary_log_prob(self, upper: bool) -> float:
        vals, probs = self._atoms()
        idx = int(np.argmax(vals)) if upper else int(np.argmin(vals))
        return math.log(probs[idx])

    def negated(self) -> "TwoPoint":
        return TwoPoint(-self.a, -self.b, self.p)


@dataclass(frozen=True)
class FiniteAtoms:
    """Displacement on a finite list of (value, probability) atoms."""

    atoms: tuple

    def __post_init__(self):
        atoms = tuple((float(v), float(p)) for v, p in self.atoms)
        if not atoms:
            raise InvalidModelError("FiniteAtoms needs at least one atom")
        probs = np.array([p for _, p in atoms])
        vals = np.array([v for v, _ in atoms])
        if np.any(probs < 0):
            raise InvalidModelError("atom probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise InvalidModelError(f"atom probabilities must sum to 1, got {probs.sum()}")
        if len(np.unique(vals)) != len(vals):
            raise InvalidModelError("atom values must be distinct")
        object.__setattr__(self, "atoms", atoms)

    def _arrays(self):
        vals = np.array([v for v, _ in self.atoms])
        probs = np.array([p for _, p in self.atoms])
        return vals, probs / probs.sum()

    def sample(self, rng, size):
        vals, probs = self._arrays()
        return rng.choice(vals, p=probs, size=size)

    def log_mgf(self, t):
        vals, probs = self._arrays()
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        return logsumexp(logp + np.multiply.outer(t, vals), axis=-1)

    def log_mgf_prime(self, t):
        vals, probs = self._arrays()
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore"):
            logw = np.log(probs) + np.multiply.outer(t, vals)
        logw -= logsumexp(logw, axis=-1, keepdims=True)
        return np.exp(logw) @ vals

    @property
    def support(self):
        vals, probs = self._arrays()
        live = vals[probs > 0]
        return (float(live.min()), float(live.max()))

    def boundary_log_prob(self, upper: bool) -> float:
        vals, probs = self._arrays()
        live = probs > 0
        target = vals[live].max() if upper else vals[live].min()
        return math.log(probs[np.argmax(vals == target)])

    def negated(self) -> "FiniteAtoms":
        return FiniteAtoms(tuple((-v, p) for v, p in self.atoms))


DisplacementLaw = Union[Gaussian, TwoPoint, FiniteAtoms]


# --------------------------------------------------------------------------
# Cluster models
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IIDCluster:
    """Offspring count from ``count_law``, displacements i.i.d. from ``displacement_law``."""

    count_law: CountLaw
    displacement_law: DisplacementLaw

    def __post_init__(self):
        if self.count_law.mean <= 0:
            raise InvalidModelError("cluster mean offspring count must be positive")


@dataclass(frozen=True)
class UnitTimeBBM:
    """Binary branching Brownian motion, observed after one unit of time.

    Particles split at rate 1; each line moves as a Brownian motion with the
    given constant ``drift`` (the boundary regime of interest uses
    ``drift = -sqrt(2)``).
    """

    drift: float

    def __post_init__(self):
        if not math.isfinite(self.drift):
            raise InvalidModelError(f"drift must be finite, got {self.drift}")


ClusterModel = Union[IIDCluster, UnitTimeBBM]


def intensity_mass(model: ClusterModel) -> float:
    """Expected number of points in one cluster."""
    if isinstance(model, UnitTimeBBM):
        return math.e
    return model.count_law.mean


def log_laplace(model: ClusterModel, t):
    """Log-Laplace transform of the cluster intensity, exact closed form.

    Accepts a scalar or an ndarray of arguments.
    """
    if isinstance(model, UnitTimeBBM):
        t = np.asarray(t, dtype=float)
        out = 0.5 * t**2 + model.drift * t + 1.0
        return float(out) if out.ndim == 0 else out
    out = math.log(model.count_law.mean) + model.displacement_law.log_mgf(t)
    out = np.asarray(out)
    return float(out) if out.ndim == 0 else out


def log_laplace_prime(model: ClusterModel, t):
    """Derivative in ``t`` of :func:`log_laplace`, exact closed form."""
    if isinstance(model, UnitTimeBBM):
        t = np.asarray(t, dtype=float)
        out = t + model.drift
        return float(out) if out.ndim == 0 else out
    out = np.asarray(model.displacement_law.log_mgf_prime(t))
    return float(out) if out.ndim == 0 else out


def displacement_support(model: ClusterModel):
    """Support interval of a single displacement (also the closure of the range
    of the derivative of the log-Laplace transform)."""
    if isinstance(model, UnitTimeBBM):
        return (-math.inf, math.inf)
    return model.displacement_law.support


def is_two_sided(model: ClusterModel) -> bool:
    """True when the intensity charges both half-lines (needed for root finding)."""
    lo, hi = displacement_support(model)
    return lo < 0 < hi


def mirror(model: ClusterModel) -> ClusterModel:
    """The model with all displacements negated."""
    if isinstance(model, UnitTimeBBM):
        return UnitTimeBBM(-model.drift)
    return IIDCluster(model.count_law, model.displacement_law.negated())


def sample_cluster(model: ClusterModel, rng: np.random.Generator) -> np.ndarray:
    """Draw one cluster; returns the (possibly empty) displacement array."""
    pos, _ = branch_positions(model, np.zeros(1), rng)
    return pos


def branch_positions(model, positions, rng, cap=None):
    """Replace every particle by a sampled cluster, vectorised.

    Returns ``(child_positions, parent_index)`` where ``parent_index[j]`` is
    the index into ``positions`` of child ``j``'s parent.  Raises
    :class:`PopulationCapError` when the offspring count would exceed ``cap``.
    """
    positions = np.asarray(positions, dtype=float)
    if isinstance(model, UnitTimeBBM):
        return _branch_bbm(model.drift, positions, rng, cap)
    counts = model.count_law.sample(rng, positions.size)
    total = int(counts.sum())
    if cap is not None and total > cap:
        raise PopulationCapError(f"next generation would hold {total} > cap {cap} particles")
    parent = np.repeat(np.arange(positions.size), counts)
    children = positions[parent] + model.displacement_law.sample(rng, total)
    return children, parent


def _branch_bbm(drift, positions, rng, cap):
    # Event-driven and exact: draw the next split time of every live line,
    # emit a leaf when the split falls beyond the residual time, otherwise
    # advance to the split and duplicate.  No time discretisation.
    out_pos = [np.empty(0)]
    out_parent = [np.empty(0, dtype=np.int64)]
    cur_pos = positions.copy()
    cur_parent = np.arange(positions.size)
    cur_t = np.ones(positions.size)
    total = 0
    while cur_pos.size:
        tau = rng.exponential(size=cur_pos.size)
        splits = tau < cur_t
        t_leaf = cur_t[~splits]
        leaves = cur_pos[~splits] + drift * t_leaf + np.sqrt(t_leaf) * rng.standard_normal(t_leaf.size)
        out_pos.append(leaves)
        out_parent.append(cur_parent[~splits])
        total += leaves.size
        t_split = tau[splits]
        moved = cur_pos[splits] + drift * t_split + np.sqrt(t_split) * rng.standard_normal(t_split.size)
        rest = cur_t[splits] - t_split
        cur_pos = np.concatenate([moved, moved])
        cur_parent = np.concatenate([cur_parent[splits], cur_parent[splits]])
        cur_t = np.concatenate([rest, rest])
        if cap is not None and total + cur_pos.size > cap:
            raise PopulationCapError(f"next generation would exceed cap {cap} particles")
    return np.concatenate(out_pos), np.concatenate(out_parent)
