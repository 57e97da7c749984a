"""Deterministic simulator for buffered asynchronous federated learning with
staleness-weighted fair aggregation."""

from .aggregation import (
    ClientUpdate,
    StalenessTracker,
    UpdateBuffer,
    aggregate_fedavg_buffered,
    aggregate_fedstaleweight,
    observe_staleness,
)
from .analysis import (
    BoundInputs,
    alpha_beta,
    convergence_bound,
    empirical_grad_norm_average,
    fairness_metrics,
    measure_bound_inputs,
    u_max,
)
from .engine import (
    ClientSpec,
    DataSpec,
    DelaySpec,
    MetricsLog,
    SimConfig,
    fairness_config,
    prepare_data,
    run_simulation,
    staleness_monte_carlo,
)
from .mechanism import (
    RateProfile,
    agent_utility,
    check_no_profitable_throttle,
    expected_staleness,
    fair_weight,
    influence,
    influence_from_staleness,
    normalized_weights,
    utility_derivative_sign,
)
from .model import Dataset, TaskSpec, local_train, loss_and_gradient

__version__ = "0.1.0"
