"""Structure-preserving integrators for linearly damped stochastic Poisson systems."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ConformalSDEError,
    DomainError,
    InsufficientData,
    InvalidArgument,
    StepDiverged,
)
from .noise import (  # noqa: E402
    NoisePath,
    TimeGrid,
    TruncationLevel,
    coarsen,
    make_time_grid,
    sample_noise,
    truncate_increment,
)
from .discrete_gradient import GradientRule, Hamiltonian, discrete_gradient  # noqa: E402
from .models import MODEL_NAMES, Damping, InvariantSpec, PoissonSystem, build_model  # noqa: E402
from .integrators import (  # noqa: E402
    SCHEMES,
    SolverConfig,
    Trajectory,
    conformal_exponential_step,
    euler_maruyama_step,
    integrate_batch,
    integrate_path,
    midpoint_step,
)
from .analysis import (  # noqa: E402
    ErrorTable,
    TestFunction,
    fit_order,
    invariant_drift,
    strong_error,
    weak_error,
)
