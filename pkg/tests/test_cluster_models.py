import math

import numpy as np
import pytest

from brwlab.cluster_models import (
    FiniteAtoms,
    Fixed,
    Gaussian,
    GeometricCount,
    IIDCluster,
    InvalidModelError,
    PoissonCount,
    TwoPoint,
    UnitTimeBBM,
    branch_positions,
    intensity_mass,
    is_two_sided,
    log_laplace,
    log_laplace_prime,
    mirror,
    sample_cluster,
)


def make_rng(seed=0):
    return np.random.Generator(np.random.Philox(key=seed))


FROZEN = IIDCluster(Fixed(1), FiniteAtoms(((0.0, 1.0),)))
GAUSS2 = IIDCluster(Fixed(2), Gaussian(-2.0, 1.0))


class TestValidation:
    def test_atom_probabilities_must_sum_to_one(self):
        with pytest.raises(InvalidModelError):
            FiniteAtoms(((0.0, 0.5), (1.0, 0.6)))

    def test_gaussian_needs_positive_variance(self):
        with pytest.raises(InvalidModelError):
            Gaussian(0.0, 0.0)

    def test_count_mean_must_be_positive(self):
        with pytest.raises(InvalidModelError):
            IIDCluster(Fixed(0), Gaussian(0.0, 1.0))

    def test_geometric_parameter_range(self):
        with pytest.raises(InvalidModelError):
            GeometricCount(0.0)

    def test_two_point_needs_distinct_values(self):
        with pytest.raises(InvalidModelError):
            TwoPoint(1.0, 1.0, 0.5)


class TestSampling:
    def test_frozen_cluster_is_single_particle_at_zero(self):
        rng = make_rng()
        for _ in range(10):
            out = sample_cluster(FROZEN, rng)
            assert out.tolist() == [0.0]

    def test_poisson_count_empty_probability(self):
        # P[empty] = exp(-0.5) for a Poisson(0.5) count
        model = IIDCluster(PoissonCount(0.5), Gaussian(0.0, 1.0))
        rng = make_rng(1)
        maxima = branch_positions(model, np.zeros(100_000), rng)
        counts = np.bincount(maxima[1], minlength=100_000)
        frac = np.mean(counts == 0)
        p = math.exp(-0.5)
        se = math.sqrt(p * (1 - p) / 100_000)
        assert abs(frac - p) < 4 * se

    def test_bbm_mean_count_is_e(self):
        rng = make_rng(2)
        model = UnitTimeBBM(-math.sqrt(2.0))
        reps = 40_000
        children, parent = branch_positions(model, np.zeros(reps), rng)
        mean = children.size / reps
        # leaf count is geometric with mean e, variance 2e^2 - ... bounded by 2e^2
        se = math.sqrt(2 * math.e**2 / reps)
        assert abs(mean - math.e) < 4 * se

    def test_bbm_leaf_count_is_yule_geometric(self):
        # P[N = k] = e^-1 (1 - e^-1)^(k-1); chi-square at the 1% level
        rng = make_rng(3)
        reps = 100_000
        _, parent = branch_positions(UnitTimeBBM(-1.5), np.zeros(reps), rng)
        counts = np.bincount(parent, minlength=reps)
        p = math.exp(-1.0)
        kmax = 12
        observed = np.array([np.sum(counts == k) for k in range(1, kmax)]
                            + [np.sum(counts >= kmax)])
        probs = np.array([p * (1 - p) ** (k - 1) for k in range(1, kmax)])
        probs = np.append(probs, 1 - probs.sum())
        expected = reps * probs
        chi2 = float(np.sum((observed - expected) ** 2 / expected))
        # 99th percentile of chi-square with 12 dof
        from scipy.stats import chi2 as chi2_dist
        assert chi2 < chi2_dist.ppf(0.99, len(expected) - 1)

    def test_geometric_count_support_starts_at_zero(self):
        law = GeometricCount(0.6)
        rng = make_rng(4)
        s = law.sample(rng, 50_000)
        assert s.min() == 0
        assert abs(s.mean() - law.mean) < 4 * math.sqrt(law.second_moment / 50_000)


class TestLogLaplace:
    def test_bbm_closed_form(self):
        # phi(t) = t^2/2 - c t + 1 for drift -c; zero at t = 2 when c = 1.5
        model = UnitTimeBBM(-1.5)
        assert log_laplace(model, 2.0) == pytest.approx(0.0, abs=1e-15)
        assert log_laplace(model, 0.0) == pytest.approx(1.0)

    def test_frozen_phi_identically_zero(self):
        for t in (-3.0, 0.0, 1.7):
            assert log_laplace(FROZEN, t) == pytest.approx(0.0, abs=1e-15)

    def test_fixed2_gaussian_value(self):
        assert log_laplace(GAUSS2, 1.0) == pytest.approx(math.log(2) - 2 + 0.5)

    def test_prime_matches_central_difference(self):
        models = [GAUSS2, UnitTimeBBM(-1.5),
                  IIDCluster(PoissonCount(0.7), TwoPoint(-1.0, 2.0, 0.3)),
                  IIDCluster(GeometricCount(0.4), FiniteAtoms(((-1.0, 0.25), (0.5, 0.5), (2.0, 0.25))))]
        h = 1e-6
        for model in models:
            for t in np.linspace(-2.0, 2.0, 9):
                num = (log_laplace(model, t + h) - log_laplace(model, t - h)) / (2 * h)
                assert log_laplace_prime(model, t) == pytest.approx(num, abs=1e-5)

    def test_empirical_laplace_transform_matches_phi(self):
        # mean of sum exp(t u) over clusters equals exp(phi(t)) within 4 SE
        rng = make_rng(5)
        reps = 100_000
        for model in (GAUSS2, IIDCluster(PoissonCount(1.2), TwoPoint(-1.0, 1.0, 0.5))):
            for t in (-0.5, 0.3, 0.8):
                children, parent = branch_positions(model, np.zeros(reps), rng)
                per = np.zeros(reps)
                np.add.at(per, parent, np.exp(t * children))
                target = math.exp(log_laplace(model, t))
                se = per.std() / math.sqrt(reps)
                assert abs(per.mean() - target) < 4 * se

    def test_cluster_count_mean_matches_intensity_mass(self):
        rng = make_rng(6)
        reps = 100_000
        for model in (GAUSS2, IIDCluster(GeometricCount(0.5), Gaussian(0.0, 1.0)),
                      UnitTimeBBM(-0.3)):
            children, parent = branch_positions(model, np.zeros(reps), rng)
            mean = children.size / reps
            se = math.sqrt(max(intensity_mass(model), 1.0) ** 2 * 4 / reps)
            assert abs(mean - intensity_mass(model)) < 4 * se

    def test_convexity_on_grid(self):
        t = np.linspace(-3, 3, 121)
        for model in (GAUSS2, UnitTimeBBM(-1.5),
                      IIDCluster(PoissonCount(0.5), FiniteAtoms(((-2.0, 0.3), (1.0, 0.7))))):
            phi = log_laplace(model, t)
            mid = 0.5 * (phi[:-2] + phi[2:])
            assert np.all(phi[1:-1] <= mid + 1e-12)


class TestModelHelpers:
    def test_intensity_mass(self):
        assert intensity_mass(IIDCluster(Fixed(2), Gaussian(0, 1))) == 2
        assert intensity_mass(IIDCluster(PoissonCount(0.5), Gaussian(0, 1))) == 0.5
        assert intensity_mass(UnitTimeBBM(-7.0)) == math.e

    def test_mirror_negates_displacements(self):
        m = mirror(GAUSS2)
        assert m.displacement_law.mu == 2.0
        assert mirror(UnitTimeBBM(-1.5)).drift == 1.5
        tp = mirror(IIDCluster(Fixed(1), TwoPoint(-1.0, 3.0, 0.25)))
        assert tp.displacement_law.support == (-3.0, 1.0)

    def test_two_sidedness(self):
        assert is_two_sided(GAUSS2)
        assert is_two_sided(UnitTimeBBM(9.0))
        assert not is_two_sided(FROZEN)
        assert not is_two_sided(IIDCluster(Fixed(2), TwoPoint(0.0, 1.0, 0.5)))
