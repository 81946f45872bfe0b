"""symcon: contraction certificates, synchrony patterns, and simulation for
nonlinear dynamical networks."""

from symcon.certify import (
    CascadeCertificate, ContractionCertificate, certify_cascade,
    certify_contraction, certify_hierarchical, certify_second_order,
    certify_toward_subspace, certify_virtual, estimate_contraction_rate,
    second_order_from_model,
)
from symcon.errors import ModelError, NonSmoothError, SymconError
from symcon.measures import (
    MeasureKind, induced_norm, matrix_measure, measure_limit_estimate,
)
from symcon.model import (
    NetworkSpec, Partition, SystemModel, assemble_network,
    check_flow_invariance, coarsest_balanced_partition, jacobian, load_model,
    loads_model, quotient_network, quotient_system,
)
from symcon.report import (
    plot_log_series, plot_time_series, write_json_report,
    write_trajectory_csv,
)
from symcon.scenarios import (
    bundled_model_path, bundled_scenarios, load_scenario, run_scenario,
    scenario_path,
)
from symcon.sim import (
    SolverConfig, Trajectory, convergence_rate, fcd_experiment, integrate,
    integrate_dde, periodicity_check, sync_error,
)
from symcon.symmetry import (
    LinearAction, ScalingActionPair, SpatioTemporalAction, Subspace,
    action_order, build_action, check_equivariance, check_input_equivariance,
    fixed_subspace, h_symmetry_residual, partition_subspace, principal_angles,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # errors
    "SymconError", "ModelError", "NonSmoothError",
    # measures
    "MeasureKind", "matrix_measure", "measure_limit_estimate", "induced_norm",
    # models and partitions
    "SystemModel", "NetworkSpec", "Partition", "load_model", "loads_model",
    "assemble_network", "jacobian", "coarsest_balanced_partition",
    "quotient_network", "quotient_system", "check_flow_invariance",
    # symmetry
    "LinearAction", "ScalingActionPair", "SpatioTemporalAction", "Subspace",
    "build_action", "fixed_subspace", "partition_subspace",
    "principal_angles", "check_equivariance", "check_input_equivariance",
    "action_order", "h_symmetry_residual",
    # simulation
    "Trajectory", "SolverConfig", "integrate", "integrate_dde", "sync_error",
    "periodicity_check", "fcd_experiment", "convergence_rate",
    # certificates
    "ContractionCertificate", "CascadeCertificate", "certify_contraction",
    "certify_toward_subspace", "certify_hierarchical", "certify_cascade",
    "certify_second_order", "certify_virtual", "second_order_from_model",
    "estimate_contraction_rate",
    # reporting
    "write_trajectory_csv", "write_json_report", "plot_time_series",
    "plot_log_series",
    # scenarios
    "bundled_scenarios", "scenario_path", "load_scenario", "run_scenario",
    "bundled_model_path",
]
