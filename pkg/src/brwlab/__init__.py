"""brwlab: persistence analysis and simulation of branching random walks
seeded by exponential-profile Poisson point processes."""

__version__ = "0.1.0"

from .cluster_models import (
    FiniteAtoms,
    Fixed,
    Gaussian,
    GeometricCount,
    IIDCluster,
    InvalidModelError,
    PoissonCount,
    PopulationCapError,
    TwoPoint,
    UnitTimeBBM,
    intensity_mass,
    log_laplace,
    mirror,
    sample_cluster,
)
from .analytics import (
    Classification,
    LaplaceProfile,
    chernoff_bound,
    classify,
    classify_multidim,
    find_roots,
    front_speed,
    laplace_profile,
    phi_prime,
    rate_function,
    truncation_bound,
)
from .simulator import (
    GenerationSummary,
    ParticleGeneration,
    ScenarioConfig,
    ScenarioResult,
    run_replicate,
    run_scenario,
    seed_initial,
    step,
    window_for,
    write_generations_csv,
)
from .backward_tree import (
    BackwardTreeSample,
    StabilityReport,
    TiltedStepLaw,
    palm_siblings,
    sample_backward_tree,
    stability_diagnostic,
    tilted_step,
)
from .stats import (
    BoundaryDecayReport,
    GumbelFit,
    MomentEstimate,
    SpeedFit,
    boundary_decay_test,
    cluster_max_moment,
    cluster_maxima,
    fit_gumbel,
    ks_statistic,
    ks_two_sample,
    speed_fit,
    superposability_test,
)
