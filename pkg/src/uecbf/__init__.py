"""Uncertainty-estimator-based robust control barrier functions."""

from .dynamics import (ControlAffineModel, IntegratorConfig, TrueSystem,
                       UncertaintySpec, eval_true_dynamics, probe_uncertainty_bounds,
                       rk4_step, simulate)
from .estimator import (EstimatorGain, EstimatorState, error_bound, estimator_derivative,
                        estimator_output, init_estimator, iss_decrement_check, make_gain,
                        output_bound)
from .filters import (BarrierFunction, HocbfCascade, Method1Params,
                      check_relative_degrees, clf_row, hocbf_method2_row,
                      matching_matrix_Q, method1_alt_row, method1_control, method1_row,
                      method2_row, nominal_cbf_row)
from .qp import AffineConstraint, QpProblem, QpSolution, oracle_project, solve
from .trace import SimulationTrace, emit_trace, read_trace

__version__ = "0.1.0"
