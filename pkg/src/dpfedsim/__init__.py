"""Deterministic simulator of differentially private federated optimization.

Builds synthetic strongly convex federations, runs private federated
averaging (with local steps) and its drift-corrected variant, calibrates
Gaussian noise to an (epsilon, delta) budget, evaluates the matching
utility bound and its closed-form optimal hyperparameters, and drives the
sweep experiments that locate the best number of local steps and
communication rounds under a fixed privacy budget.
"""

from ._backend import backend_name
from .problems import (
    ClientObjective,
    Federation,
    HeterogeneitySpec,
    LogisticObjective,
    QuadraticObjective,
    closed_form_optimum,
    constants,
    generate_federation,
    gradient,
    load_federation,
    loss,
    minibatch_gradient,
    numeric_optimum,
    save_federation,
)
from .privacy import (
    MechanismParams,
    PrivacyBudget,
    calibrate_sigma2,
    check_epsilon_regime,
    clip,
    gaussian_noise,
    noise_stream,
)
from .algorithms import (
    FedAvgConfig,
    RoundRecord,
    RunState,
    ScaffNewConfig,
    fedavg_round,
    init_state,
    run,
    scaffnew_step,
)
from .theory import (
    BoundInputs,
    OptimalParams,
    bound_derivatives,
    contraction_factor,
    grid_argmin_rounds,
    lyapunov,
    optimal_params,
    utility_bound,
)

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "ClientObjective",
    "Federation",
    "HeterogeneitySpec",
    "LogisticObjective",
    "QuadraticObjective",
    "closed_form_optimum",
    "constants",
    "generate_federation",
    "gradient",
    "load_federation",
    "loss",
    "minibatch_gradient",
    "numeric_optimum",
    "save_federation",
    "MechanismParams",
    "PrivacyBudget",
    "calibrate_sigma2",
    "check_epsilon_regime",
    "clip",
    "gaussian_noise",
    "noise_stream",
    "FedAvgConfig",
    "RoundRecord",
    "RunState",
    "ScaffNewConfig",
    "fedavg_round",
    "init_state",
    "run",
    "scaffnew_step",
    "BoundInputs",
    "OptimalParams",
    "bound_derivatives",
    "contraction_factor",
    "grid_argmin_rounds",
    "lyapunov",
    "optimal_params",
    "utility_bound",
    "__version__",
]
