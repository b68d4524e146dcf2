"""Forward Monte Carlo of the branching dynamics seeded by an exponential
Poisson profile.

One generation is a flat array of particle positions plus the index of each
particle's time-zero ancestor (no genealogy beyond the root label is kept).
Two budgets control the finite-window approximation of the infinite system:

* ``eps_trunc``: expected number of relevant particles lost to truncating the
  seeding window, certified through :func:`analytics.truncation_bound`;
* ``eps_prune``: expected number of observation-window entries lost to
  dropping particles whose descendants cannot plausibly climb back, via the
  per-generation first-moment bound of :func:`prune_level_for`.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from . import analytics
from .cluster_models import (
    ClusterModel,
    PopulationCapError,
    branch_positions,
    displacement_support,
    log_laplace_prime,
    mirror,
)

DEFAULT_POPULATION_CAP = 10**8
WINDOW_DEPTH_CAP = 1e6


class WindowInfeasibleError(RuntimeError):
    """No seeding window within the depth cap satisfies the truncation budget."""


@dataclass(frozen=True)
class ScenarioConfig:
    model: ClusterModel
    lam: float
    n_gens: int
    obs_window: tuple  # (a_obs, b_obs)
    seed_window: tuple  # (L, R)
    rng_seed: int
    replicates: int = 1
    c_mult: float = 1.0
    eps_trunc: float = 1e-3
    eps_prune: float = 0.0  # 0 disables pruning
    bins: int = 50
    population_cap: int = DEFAULT_POPULATION_CAP
    mirrored: bool = False  # set by normalize_scenario, echoed in reports
    # Containment knobs beyond the certified budgets.  The first-moment
    # pruning bound alone cannot hold supercritical populations at desk
    # scale, so scenarios may additionally kill particles below a fixed
    # level (hard_floor) or more than front_window below the running
    # leader.  Both default to off; they trade a quantified coverage
    # deficit for bounded populations.
    hard_floor: Optional[float] = None
    front_window: Optional[float] = None

    def __post_init__(self):
        lo, hi = self.obs_window
        L, R = self.seed_window
        if not lo < hi:
            raise ValueError(f"observation window must satisfy lo < hi, got {self.obs_window}")
        if not L < R:
            raise ValueError(f"seed window must satisfy L < R, got {self.seed_window}")
        if not (0 < self.eps_trunc < 1):
            raise ValueError(f"eps_trunc must lie in (0, 1), got {self.eps_trunc}")
        if not (0 <= self.eps_prune < 1):
            raise ValueError(f"eps_prune must lie in [0, 1), got {self.eps_prune}")
        if self.n_gens < 1 or self.replicates < 1 or self.bins < 1:
            raise ValueError("n_gens, replicates and bins must be positive")


@dataclass
class ParticleGeneration:
    gen_index: int
    positions: np.ndarray
    root_ids: np.ndarray
    root_positions: np.ndarray


@dataclass(frozen=True)
class GenerationSummary:
    gen_index: int
    count_in_obs: int
    max_pos: Optional[float]
    leader_root_pos: Optional[float]
    histogram: np.ndarray = field(repr=False)


def normalize_scenario(config: ScenarioConfig) -> ScenarioConfig:
    """Reduce a negative-rate scenario to the positive-rate code path.

    Negating every displacement and the rate is a symmetry of the model, so a
    scenario with lam < 0 runs as its mirror image; summaries are then in
    mirrored coordinates and the config echoes ``mirrored=True``.
    """
    if config.lam >= 0:
        return config
    lo, hi = config.obs_window
    L, R = config.seed_window
    return replace(
        config,
        model=mirror(config.model),
        lam=-config.lam,
        obs_window=(-hi, -lo),
        seed_window=(-R, -L),
        mirrored=not config.mirrored,
    )


def replicate_stream(rng_seed: int, replicate_index: int) -> np.random.Generator:
    """Independent counter-based stream for one replicate.

    Philox is splittable: each replicate jumps the base stream by a disjoint
    2^128 block, so results do not depend on scheduling order.
    """
    return np.random.Generator(np.random.Philox(key=rng_seed).jumped(replicate_index))


def window_for(model, lam, c_mult, n_gens, obs_window, eps_trunc):
    """Seeding window [L, R] meeting the truncation budget.

    R caps the expected seed count to the right at ``eps_trunc / 2``; L starts
    at the observation edge minus a speed-times-horizon allowance and deepens
    until :func:`analytics.truncation_bound` certifies the left tail.
    """
    if lam <= 0:
        raise analytics.OutOfDomainError("window_for needs lambda > 0 (normalize first)")
    a_obs, b_obs = obs_window
    R = math.log(2 * c_mult / (lam * eps_trunc)) / lam
    R = max(R, b_obs)
    speed = max(1.0, log_laplace_prime(model, lam))
    fs = analytics.front_speed(model)
    if math.isfinite(fs):
        speed = max(speed, abs(fs))
    margin = 1.0
    while True:
        L = a_obs - speed * n_gens - margin
        if abs(L) > WINDOW_DEPTH_CAP:
            raise WindowInfeasibleError(
                f"no certifiable left edge within depth {WINDOW_DEPTH_CAP}"
            )
        if analytics.truncation_bound(model, lam, c_mult, L, n_gens, a_obs) <= eps_trunc / 2:
            return (L, R)
        margin *= 2


def seed_initial(config: ScenarioConfig, rng: np.random.Generator) -> ParticleGeneration:
    """Poisson seeds with density c_mult * exp(-lam u) on the seed window.

    Positions come from the exact inverse transform of the truncated
    exponential profile; lam = 0 degenerates to the uniform profile.
    """
    lam, c = config.lam, config.c_mult
    L, R = config.seed_window
    if lam == 0:
        mass = c * (R - L)
    else:
        log_mass = math.log(c / lam) - lam * L
        if log_mass > math.log(4 * config.population_cap):
            raise PopulationCapError(
                f"expected seed count exp({log_mass:.1f}) exceeds the population cap"
            )
        mass = c * (math.exp(-lam * L) - math.exp(-lam * R)) / lam
    n = int(rng.poisson(mass))
    if n > config.population_cap:
        raise PopulationCapError(f"seed count {n} exceeds cap {config.population_cap}")
    if lam == 0:
        pos = rng.uniform(L, R, size=n)
    else:
        v = rng.random(n)
        a = math.exp(-lam * L)
        b = math.exp(-lam * R)
        pos = -np.log(a - v * (a - b)) / lam
    return ParticleGeneration(
        gen_index=0,
        positions=pos,
        root_ids=np.arange(n, dtype=np.int64),
        root_positions=pos.copy(),
    )


def step(gen, model, rng, prune_level=None, population_cap=DEFAULT_POPULATION_CAP):
    """One branching step: optional prune below ``prune_level``, then replace
    every particle by an independent cluster around its position."""
    pos, roots = gen.positions, gen.root_ids
    if prune_level is not None and pos.size:
        keep = pos >= prune_level
        pos, roots = pos[keep], roots[keep]
    children, parent = branch_positions(model, pos, rng, cap=population_cap)
    return ParticleGeneration(
        gen_index=gen.gen_index + 1,
        positions=children,
        root_ids=roots[parent] if roots.size else roots,
        root_positions=gen.root_positions,
    )


def prune_level_for(model, lam, gen_index, n_gens, a_obs, eps_prune, current_count):
    """Deepest level whose removal provably costs at most eps_prune / n_gens
    expected observation-window entries over the remaining horizon.

    With m generations to go, a particle at x has at most
    exp(-m I((a_obs - x)/m)) expected descendants ever at or above a_obs, so
    the level solves current_count * exp(-m I(z)) = eps_prune / n_gens over
    z >= phi'(0), where the bound is monotone.  Returns None when nothing can
    be certified.
    """
    if eps_prune <= 0:
        return None
    m = n_gens - gen_index
    if m <= 0:
        return a_obs
    if current_count <= 0:
        return None
    h = math.log(current_count * n_gens / eps_prune) / m
    # bucket h upward so the inversion caches; a larger h gives a deeper,
    # still-sound level
    h = math.ceil(h * 64.0) / 64.0
    return a_obs - m * _reach_slope(model, h)


@lru_cache(maxsize=16384)
def _reach_slope(model, h):
    """Smallest z >= phi'(0) with rate(z) >= h: the per-generation climb a
    particle must beat for its descendants to matter at level a_obs."""
    mean_slope = log_laplace_prime(model, 0.0)
    if analytics.rate_function(model, mean_slope) >= h:
        return mean_slope
    _, hi_sup = displacement_support(model)
    if math.isfinite(hi_sup):
        if analytics.rate_function(model, hi_sup) < h:
            # only positions that cannot reach a_obs at all are removable
            return hi_sup
        z_hi = hi_sup
    else:
        step_out = 1.0
        z_hi = mean_slope + step_out
        while analytics.rate_function(model, z_hi) < h:
            step_out *= 2
            z_hi = mean_slope + step_out
    return analytics._bisect(
        lambda z: analytics.rate_function(model, z) - h, mean_slope, z_hi
    )


def summarize(gen: ParticleGeneration, config: ScenarioConfig) -> GenerationSummary:
    lo, hi = config.obs_window
    pos = gen.positions
    hist, _ = np.histogram(pos, bins=config.bins, range=(lo, hi))
    if pos.size:
        imax = int(np.argmax(pos))
        max_pos = float(pos[imax])
        leader_root_pos = float(gen.root_positions[gen.root_ids[imax]])
    else:
        max_pos = None
        leader_root_pos = None
    return GenerationSummary(
        gen_index=gen.gen_index,
        count_in_obs=int(hist.sum()),
        max_pos=max_pos,
        leader_root_pos=leader_root_pos,
        histogram=hist,
    )


def run_replicate(config: ScenarioConfig, replicate_index: int):
    """One full trajectory; deterministic given (rng_seed, replicate_index).

    The config must already be normalized to lam >= 0.
    """
    rng = replicate_stream(config.rng_seed, replicate_index)
    a_obs = config.obs_window[0]
    gen = seed_initial(config, rng)
    summaries = [summarize(gen, config)]
    for g in range(config.n_gens):
        level = prune_level_for(
            config.model, config.lam, g, config.n_gens, a_obs,
            config.eps_prune, gen.positions.size,
        )
        candidates = [] if level is None else [level]
        if config.hard_floor is not None:
            candidates.append(config.hard_floor)
        if config.front_window is not None and gen.positions.size:
            candidates.append(float(gen.positions.max()) - config.front_window)
        level = max(candidates) if candidates else None
        gen = step(gen, config.model, rng, prune_level=level,
                   population_cap=config.population_cap)
        summaries.append(summarize(gen, config))
    return summaries


@dataclass(frozen=True)
class ScenarioResult:
    config: ScenarioConfig  # normalized config actually run
    replicates: list  # list of per-replicate summary lists


def run_scenario(config: ScenarioConfig, jobs: int = 1) -> ScenarioResult:
    """All replicates of one scenario, each on its own stream."""
    config = normalize_scenario(config)
    indices = range(config.replicates)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reps = list(pool.map(_run_one, [(config, r) for r in indices]))
    else:
        reps = [run_replicate(config, r) for r in indices]
    return ScenarioResult(config=config, replicates=reps)


def _run_one(args):
    config, r = args
    return run_replicate(config, r)


def write_generations_csv(result: ScenarioResult, path):
    """Per-generation CSV: replicate, gen, count_in_obs, max_pos,
    leader_root_pos, bin_0..bin_{B-1}.  Missing values are empty fields."""
    bins = result.config.bins
    header = ["replicate", "gen", "count_in_obs", "max_pos", "leader_root_pos"]
    header += [f"bin_{i}" for i in range(bins)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(header) + "\n")
        for r, summaries in enumerate(result.replicates):
            for s in summaries:
                row = [
                    str(r),
                    str(s.gen_index),
                    str(s.count_in_obs),
                    "" if s.max_pos is None else repr(s.max_pos),
                    "" if s.leader_root_pos is None else repr(s.leader_root_pos),
                ]
                row += [str(int(c)) for c in s.histogram]
                f.write(",".join(row) + "\n")
