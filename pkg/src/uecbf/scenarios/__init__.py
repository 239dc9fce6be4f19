"""Benchmark scenarios: adaptive cruise control and multirotor avoidance."""

from .acc import (ACC_COLUMNS, ACC_MODES, AccScenario, AccUncertainty, acc_defaults,
                  acc_scenario_for_seed, run_acc, sample_acc_uncertainty)
from .multirotor import (MR_MODES, MultirotorScenario, MultirotorUncertainty, Obstacle,
                         mr_columns, multirotor_defaults, multirotor_scenario_for_seed,
                         run_multirotor, sample_multirotor_uncertainty)
