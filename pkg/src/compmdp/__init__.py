"""Compositional finite MDP abstractions of interconnected linear stochastic systems."""
from .bounds import closeness_bound, epsilon_for_confidence, infinite_horizon_bound
from .certificate import (StorageCertificate, check_certificate, check_storage_matrix_inequality, interface,
                          room_certificate, storage_certificate, storage_value)
from .composition import (SimulationFunctionParams, aggregate_simulation_function, assemble_xcmp,
                          check_internal_inclusion, check_lmi_condition, check_matching_condition, compose,
                          gershgorin_margin)
from .grid import Box, Grid, grid_for_delta, partition_box, singleton_grid
from .mdp import FiniteMdp, abstract_subsystem, dump_mdp, load_mdp, validate_stochastic
from .model import (InterconnectionSpec, LinearSubsystem, circulant_coupling, concrete_step, room_network,
                    room_subsystem, validate_interconnection)
from .sim import (TrajectoryBatch, empirical_exceedance, empirical_supermartingale_check,
                  simulate_closed_loop)
from .synthesis import Policy, refine_policy, safety_value_iteration

__version__ = "0.1.0"
