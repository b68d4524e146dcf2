"""Deterministic convex analysis on the cluster log-Laplace transform.

Everything here is a pure function of a cluster model: roots of the
log-Laplace transform, its Legendre-Fenchel transform (the large-deviation
rate function of the cluster maximum), the rightmost-particle speed, the
persistence classification, and the first-moment bounds used by the
simulator to certify seeding windows and pruning levels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .cluster_models import (
    ClusterModel,
    IIDCluster,
    displacement_support,
    intensity_mass,
    is_two_sided,
    log_laplace,
    log_laplace_prime,
)

ROOT_ATOL = 1e-10          # |phi| at any reported root
TANGENCY_ATOL = 1e-12      # min phi within this of zero counts as a double root
CLASSIFY_TOL = 1e-9        # dead band of lambda * phi'(lambda) mapped to inconclusive
ROOT_PRECONDITION_TOL = 1e-8
BRACKET_CAP = 1e3


class OneSidedIntensityError(ValueError):
    """Root finding requires displacement mass on both sides of the origin."""


class NonRootError(ValueError):
    """An operation that needs a root of the log-Laplace transform got a non-root."""


class OutOfDomainError(ValueError):
    """Argument outside the validity region of a bound."""


class BracketError(RuntimeError):
    """A bracketing search needed |t| beyond the configured cap."""


@dataclass(frozen=True)
class Classification:
    """Persistence verdict at a root, by the sign of lambda * phi'(lambda)."""

    verdict: str  # "persistent" | "extinct" | "inconclusive"
    product: float


@dataclass(frozen=True)
class LaplaceProfile:
    """Summary of the log-Laplace transform of one cluster model."""

    model: ClusterModel
    roots: tuple
    criticality: str  # "subcritical" | "critical" | "supercritical"
    front_speed: float  # -inf in the subcritical case
    persistent_roots: tuple  # roots with lambda * phi'(lambda) > 0


def _bisect(f, lo, hi, flo=None, *, xtol=1e-14, max_iter=200):
    """Plain bisection for a sign change of ``f`` on [lo, hi]."""
    flo = f(lo) if flo is None else flo
    if flo == 0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < xtol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def phi_prime(model: ClusterModel, t: float) -> float:
    """Derivative of the log-Laplace transform, exact closed form."""
    return log_laplace_prime(model, t)


def _argmin_phi(model: ClusterModel) -> float:
    """Minimiser of phi, located by bisection on the increasing phi'."""
    lo, hi = -1.0, 1.0
    while log_laplace_prime(model, lo) >= 0:
        lo *= 2
        if -lo > BRACKET_CAP:
            raise BracketError("argmin search needs t below -1e3")
    while log_laplace_prime(model, hi) <= 0:
        hi *= 2
        if hi > BRACKET_CAP:
            raise BracketError("argmin search needs t above 1e3")
    return _bisect(lambda t: log_laplace_prime(model, t), lo, hi)


def find_roots(model: ClusterModel):
    """All real solutions of phi(lambda) = 0, sorted.

    Returns an empty list when min phi > 0 and a single tangency root when
    the minimum sits within ``TANGENCY_ATOL`` of zero.  Requires displacement
    mass on both half-lines so that phi grows at both ends.
    """
    if not is_two_sided(model):
        raise OneSidedIntensityError(
            "cluster intensity is concentrated on a half-line; phi has no two-sided growth"
        )
    t0 = _argmin_phi(model)
    min_phi = log_laplace(model, t0)
    if min_phi > TANGENCY_ATOL:
        return []
    if abs(min_phi) <= TANGENCY_ATOL:
        return [t0]

    roots = []
    for direction in (-1.0, 1.0):
        step = 1.0
        outer = t0 + direction * step
        while log_laplace(model, outer) <= 0:
            step *= 2
            outer = t0 + direction * step
            if abs(outer) > 2 * BRACKET_CAP:
                raise BracketError("root bracket expansion exceeded the cap")
        inner = t0
        lo, hi = (outer, inner) if direction < 0 else (inner, outer)
        root = _bisect(lambda t: log_laplace(model, t), lo, hi, xtol=1e-15)
        roots.append(root)
    roots.sort()
    for r in roots:
        if abs(log_laplace(model, r)) > ROOT_ATOL:
            raise BracketError(f"root refinement stalled at phi({r}) = {log_laplace(model, r)}")
    return roots


def rate_function(model: ClusterModel, z: float) -> float:
    """Legendre-Fenchel transform of phi at ``z`` (+inf outside the closure
    of the range of phi').

    Solves phi'(t) = z by bisection on the monotone derivative, expanding the
    bracket from [-1, 1]; at the boundary of a bounded-support model the
    transform is finite and returned in closed form.
    """
    lo_sup, hi_sup = displacement_support(model)
    if z > hi_sup or z < lo_sup:
        return math.inf
    if z == hi_sup and math.isfinite(hi_sup):
        return -(math.log(intensity_mass(model)) + model.displacement_law.boundary_log_prob(True))
    if z == lo_sup and math.isfinite(lo_sup):
        return -(math.log(intensity_mass(model)) + model.displacement_law.boundary_log_prob(False))

    lo, hi = -1.0, 1.0
    while log_laplace_prime(model, lo) >= z:
        lo *= 2
        if -lo > BRACKET_CAP:
            raise BracketError("Legendre search needs t below -1e3")
    while log_laplace_prime(model, hi) <= z:
        hi *= 2
        if hi > BRACKET_CAP:
            raise BracketError("Legendre search needs t above 1e3")
    t_star = _bisect(lambda t: log_laplace_prime(model, t) - z, lo, hi)
    return z * t_star - log_laplace(model, t_star)


def criticality(model: ClusterModel) -> str:
    """Sub/super/critical by the sign of phi(0) = log mean offspring count."""
    phi0 = log_laplace(model, 0.0)
    if phi0 < -TANGENCY_ATOL:
        return "subcritical"
    if phi0 > TANGENCY_ATOL:
        return "supercritical"
    return "critical"


def front_speed(model: ClusterModel) -> float:
    """Largest zero of the rate function: the a.s. linear speed of the
    rightmost particle of a single branching random walk.

    Returns -inf in the subcritical case by convention.
    """
    kind = criticality(model)
    if kind == "subcritical":
        return -math.inf
    z_mean = log_laplace_prime(model, 0.0)
    if kind == "critical":
        # rate function is minimised at phi'(0) with value -phi(0) = 0
        return z_mean
    # supercritical: the rate function is negative at its minimiser phi'(0)
    # and increases to the right; bracket the largest zero.
    _, hi_sup = displacement_support(model)
    if math.isfinite(hi_sup):
        if rate_function(model, hi_sup) <= ROOT_ATOL:
            return hi_sup
        z_hi = hi_sup
    else:
        step = 1.0
        z_hi = z_mean + step
        while rate_function(model, z_hi) <= 0:
            step *= 2
            z_hi = z_mean + step
            if step > 1e6:
                raise BracketError("front speed bracket expansion failed")
    return _bisect(lambda z: rate_function(model, z), z_mean, z_hi, xtol=1e-14)


def classify(model: ClusterModel, lam: float) -> Classification:
    """Persistence verdict at a root ``lam`` of the log-Laplace transform.

    The sign of lambda * phi'(lambda) decides; a dead band of
    ``CLASSIFY_TOL`` maps to "inconclusive" (the criterion is silent on the
    boundary, and the critical root lambda = 0 also lands here).
    """
    if abs(log_laplace(model, lam)) > ROOT_PRECONDITION_TOL:
        raise NonRootError(f"phi({lam}) = {log_laplace(model, lam)}; not a root")
    product = lam * log_laplace_prime(model, lam)
    return Classification(_verdict(product), product)


def classify_multidim(phi, grad_phi, lam) -> Classification:
    """Persistence verdict for a caller-supplied d-dimensional transform.

    ``phi`` and ``grad_phi`` are closed-form callables on vectors; the sign
    of <lambda, grad phi(lambda)> decides exactly as in one dimension.
    """
    lam = np.asarray(lam, dtype=float)
    if abs(float(phi(lam))) > ROOT_PRECONDITION_TOL:
        raise NonRootError(f"phi({lam}) = {phi(lam)}; not a root")
    product = float(np.dot(lam, np.asarray(grad_phi(lam), dtype=float)))
    return Classification(_verdict(product), product)


def _verdict(product: float) -> str:
    if product > CLASSIFY_TOL:
        return "persistent"
    if product < -CLASSIFY_TOL:
        return "extinct"
    return "inconclusive"


def laplace_profile(model: ClusterModel) -> LaplaceProfile:
    """Roots, criticality, front speed and the persistent-root set, bundled."""
    roots = tuple(find_roots(model))
    persistent = tuple(r for r in roots if classify(model, r).verdict == "persistent")
    return LaplaceProfile(
        model=model,
        roots=roots,
        criticality=criticality(model),
        front_speed=front_speed(model),
        persistent_roots=persistent,
    )


def chernoff_bound(model: ClusterModel, n: int, a: float) -> float:
    """First-moment tail bound P[max of generation n >= a] <= exp(-n I(a/n)).

    Valid for ``a >= n * phi'(0)``; the +inf value of the rate function maps
    to a zero bound.
    """
    if n <= 0:
        raise OutOfDomainError(f"generation must be positive, got {n}")
    mean_slope = log_laplace_prime(model, 0.0)
    if a < n * mean_slope - 1e-12:
        raise OutOfDomainError(f"bound needs a >= n phi'(0) = {n * mean_slope}, got a = {a}")
    rate = rate_function(model, a / n)
    if math.isinf(rate):
        return 0.0
    return float(min(1.0, math.exp(-n * rate)))


def truncation_bound(model, lam, c_mult, L, n, a_obs):
    """Upper bound on the expected number of particles at or above ``a_obs``
    in any generation up to ``n`` descending from seeds below ``L``.

    Combines the exponential seeding mass with the per-generation Chernoff
    bound and integrates by adaptive quadrature; used to certify that a
    finite seeding window loses at most a known expected count.
    """
    if lam <= 0:
        raise OutOfDomainError(f"bound requires lambda > 0, got {lam}")
    mean_slope = log_laplace_prime(model, 0.0)
    for k in (1, n):
        if (a_obs - L) / k < mean_slope - 1e-12:
            raise OutOfDomainError(
                f"window too small for the horizon: (a_obs - L)/{k} < phi'(0)"
            )
    _, hi_sup = displacement_support(model)
    total = 0.0
    for k in range(1, n + 1):
        def log_integrand(u, k=k):
            rate = rate_function(model, (a_obs - u) / k)
            if math.isinf(rate):
                return -math.inf
            return -lam * u - k * rate

        # integrand support: below a_obs - k*sup the rate is +inf
        u_floor = a_obs - k * hi_sup if math.isfinite(hi_sup) else -math.inf
        if u_floor >= L:
            continue
        u_peak = a_obs - k * log_laplace_prime(model, lam)
        ref = min(L, u_peak) if u_peak < L else L
        peak_val = log_integrand(ref)
        if peak_val == -math.inf:
            continue
        # expand downward until the integrand is negligible relative to its peak
        lo = ref - 1.0
        while log_integrand(lo) > peak_val - 80 and (math.isinf(u_floor) or lo > u_floor):
            lo = ref - 2 * (ref - lo)
        if math.isfinite(u_floor):
            lo = max(lo, u_floor)
        val, _ = quad(lambda u: math.exp(log_integrand(u)), lo, L, limit=200)
        total += val
    return c_mult * total
