"""Backward genealogy of a tagged particle and the stability diagnostic.

The construction traces one individual backward in time: its ancestor line is
a random walk with the exponentially tilted displacement law, each ancestor
carries a reduced-Palm cluster of siblings (size-biased count minus one, with
i.i.d. marks), and every sibling is branched forward again to the present.
The total occupation measure of these relatives is locally finite exactly in
the persistent regime, which turns the construction into an empirical
stability diagnostic: estimate how often relatives from generation depth n
land in a half-line [a, inf) and test whether those frequencies die out
geometrically or stay bounded away from zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import analytics
from .cluster_models import (
    FiniteAtoms,
    Fixed,
    Gaussian,
    GeometricCount,
    IIDCluster,
    PoissonCount,
    PopulationCapError,
    TwoPoint,
    branch_positions,
    log_laplace,
)
from .simulator import prune_level_for


class UnsupportedModelError(TypeError):
    """The backward construction needs an i.i.d. cluster model."""


@dataclass(frozen=True)
class TiltedStepLaw:
    """Exponentially tilted displacement law, the ancestor-walk step.

    Closed-form tilt: a Gaussian shifts its mean by lam * variance, an atom
    law reweights each atom by exp(lam * value).  At a root of the
    log-Laplace transform the tilted mean equals phi'(lam).
    """

    base: IIDCluster
    lam: float
    law: object
    mean: float

    def sample(self, rng, size: int) -> np.ndarray:
        return self.law.sample(rng, size)


def tilted_step(model, lam: float) -> TiltedStepLaw:
    if not isinstance(model, IIDCluster):
        raise UnsupportedModelError("tilted step law is only defined for IIDCluster models")
    if abs(log_laplace(model, lam)) > analytics.ROOT_PRECONDITION_TOL:
        raise analytics.NonRootError(f"phi({lam}) != 0; tilt is not a probability step law")
    disp = model.displacement_law
    if isinstance(disp, Gaussian):
        tilted = Gaussian(disp.mu + lam * disp.var, disp.var)
    elif isinstance(disp, TwoPoint):
        wa = disp.p * math.exp(lam * disp.a)
        wb = (1 - disp.p) * math.exp(lam * disp.b)
        tilted = TwoPoint(disp.a, disp.b, wa / (wa + wb))
    elif isinstance(disp, FiniteAtoms):
        vals = np.array([v for v, _ in disp.atoms])
        probs = np.array([p for _, p in disp.atoms])
        w = probs * np.exp(lam * vals)
        w /= w.sum()
        tilted = FiniteAtoms(tuple(zip(vals.tolist(), w.tolist())))
    else:
        raise UnsupportedModelError(f"no closed-form tilt for {type(disp).__name__}")
    mean = analytics.phi_prime(model, lam)
    return TiltedStepLaw(base=model, lam=lam, law=tilted, mean=mean)


def palm_siblings(model, rng: np.random.Generator) -> np.ndarray:
    """One reduced-Palm sibling cluster: size-biased count minus one, marks
    i.i.d. from the displacement law.

    Exact per family: a constant count k yields k - 1 siblings, a Poisson
    count is its own reduced Palm law (Slivnyak), and the geometric count
    size-biases to 1 + NegBinomial(2, p).
    """
    if not isinstance(model, IIDCluster):
        raise UnsupportedModelError("reduced Palm sampling is only defined for IIDCluster models")
    law = model.count_law
    if isinstance(law, Fixed):
        n_sib = law.k - 1
    elif isinstance(law, PoissonCount):
        n_sib = int(rng.poisson(law.m))
    elif isinstance(law, GeometricCount):
        n_sib = int(rng.negative_binomial(2, law.p))
    else:
        raise UnsupportedModelError(f"no size-biased sampler for {type(law).__name__}")
    return model.displacement_law.sample(rng, n_sib)


@dataclass(frozen=True)
class BackwardTreeSample:
    """One realization of the backward tree down to depth ``n_max``.

    ``ancestor_positions[i]`` is S_{i+1}, the cumulative tilted walk;
    ``hit_counts`` holds the number of level-n relatives in [a, inf) at time
    zero, NaN when the forward branching of that level was truncated at the
    population cap (the level is then conservatively treated as a hit).
    """

    n_max: int
    a: float
    ancestor_positions: np.ndarray
    sibling_counts: np.ndarray
    hit_counts: np.ndarray
    hits: np.ndarray
    truncated: np.ndarray


def sample_backward_tree(model, lam, n_max, a, rng, *,
                         eps_prune=0.05, cousin_cap=2_000_000) -> BackwardTreeSample:
    """Draw one backward tree and record which depths contribute relatives
    at or above ``a``.

    Siblings at depth n are branched forward n - 1 generations with the
    simulator's first-moment pruning against level ``a`` (budget
    eps_prune / n_max per depth).  A population-cap hit is recorded as a
    truncated, conservatively-hit level.
    """
    tilt = tilted_step(model, lam)
    s = np.empty(n_max)
    k_n = np.zeros(n_max, dtype=np.int64)
    counts = np.zeros(n_max)
    hits = np.zeros(n_max, dtype=bool)
    truncated = np.zeros(n_max, dtype=bool)
    pos_anc = 0.0
    for level in range(1, n_max + 1):
        pos_anc -= float(tilt.sample(rng, 1)[0])  # ancestor moves to -S_n
        s[level - 1] = -pos_anc
        sib = palm_siblings(model, rng)
        k_n[level - 1] = sib.size
        if sib.size == 0:
            continue
        pos = pos_anc + sib
        try:
            pos = _branch_forward(model, lam, pos, level - 1, a, rng,
                                  eps_prune / n_max, cousin_cap)
        except PopulationCapError:
            truncated[level - 1] = True
            hits[level - 1] = True
            counts[level - 1] = math.nan
            continue
        c = int(np.count_nonzero(pos >= a))
        counts[level - 1] = c
        hits[level - 1] = c > 0
    return BackwardTreeSample(
        n_max=n_max, a=a, ancestor_positions=s, sibling_counts=k_n,
        hit_counts=counts, hits=hits, truncated=truncated,
    )


def _branch_forward(model, lam, positions, n_gens, a, rng, eps, cap):
    pos = positions
    for g in range(n_gens):
        level = prune_level_for(model, lam, g, n_gens, a, eps, pos.size)
        if level is not None and pos.size:
            pos = pos[pos >= level]
        pos, _ = branch_positions(model, pos, rng, cap=cap)
        if pos.size == 0:
            break
    return pos


@dataclass(frozen=True)
class StabilityReport:
    verdict: str  # "stable-consistent" | "unstable-consistent" | "inconclusive"
    levels: np.ndarray
    hit_freq: np.ndarray
    hit_se: np.ndarray
    partial_sums: np.ndarray
    decay_slope: float  # fitted slope of log hit frequency, NaN if no window
    decay_slope_se: float
    fit_window: tuple  # (first level, last level) used for the fit, or None
    truncated_fraction: float
    replicates: int


_Z99 = 2.3263478740408408  # one-sided 99% normal quantile


def stability_diagnostic(model, lam, n_max, a, replicates, rng, *,
                         eps_prune=0.05, cousin_cap=2_000_000) -> StabilityReport:
    """Estimate P[depth-n relatives reach [a, inf)] and classify the decay.

    "stable-consistent": the log hit frequencies fall with a slope negative
    at one-sided 99% confidence (geometric decay, locally finite total).
    "unstable-consistent": hit frequencies at the deepest levels are bounded
    away from zero at the same confidence.  Anything else is inconclusive.
    Truncated levels count as hits, which is conservative for stability.
    """
    hits = np.zeros((replicates, n_max))
    trunc = np.zeros((replicates, n_max), dtype=bool)
    for r in range(replicates):
        sample = sample_backward_tree(model, lam, n_max, a, rng,
                                      eps_prune=eps_prune, cousin_cap=cousin_cap)
        hits[r] = sample.hits
        trunc[r] = sample.truncated
    p_hat = hits.mean(axis=0)
    se = np.sqrt(p_hat * (1 - p_hat) / replicates)
    levels = np.arange(1, n_max + 1)

    # longest prefix of levels with positive frequency supports the decay fit
    positive = p_hat > 0
    prefix = 0
    while prefix < n_max and positive[prefix]:
        prefix += 1
    slope = slope_se = math.nan
    window = None
    if prefix >= 3:
        x = levels[:prefix].astype(float)
        y = np.log(p_hat[:prefix])
        slope, slope_se = _ols_slope(x, y)
        window = (1, prefix)

    deep = slice(max(0, n_max - 3), n_max)
    deep_positive = bool(np.all(p_hat[deep] - _Z99 * se[deep] > 0))
    decaying = window is not None and slope + _Z99 * slope_se < 0

    if deep_positive and not decaying:
        verdict = "unstable-consistent"
    elif decaying and not deep_positive:
        verdict = "stable-consistent"
    elif not np.any(positive):
        verdict = "stable-consistent"
    else:
        verdict = "inconclusive"
    return StabilityReport(
        verdict=verdict,
        levels=levels,
        hit_freq=p_hat,
        hit_se=se,
        partial_sums=np.cumsum(p_hat),
        decay_slope=slope,
        decay_slope_se=slope_se,
        fit_window=window,
        truncated_fraction=float(trunc.mean()),
        replicates=replicates,
    )


def _ols_slope(x, y):
    xc = x - x.mean()
    slope = float(np.dot(xc, y) / np.dot(xc, xc))
    intercept = float(y.mean() - slope * x.mean())
    resid = y - intercept - slope * x
    dof = max(1, len(x) - 2)
    se = math.sqrt(float(np.dot(xc**2, resid**2)) * len(x) / dof) / float(np.dot(xc, xc))
    return slope, se
