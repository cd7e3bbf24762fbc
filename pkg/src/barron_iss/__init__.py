"""Inverse scale space flow for sparse measure recovery in Barron spaces."""
from .measure import (Atom, AtomSet, DualVariable, FeasibilityReport, SparseMeasure, WeightVariant,
                      dual_feasibility, j_norm, pairing, subgradient_consistency, total_variation,
                      weight_of)
from .operators import (Activation, ActivationKind, Dataset, DesignMatrix, backproject,
                        build_design_matrix, loss_rf, predict)
from .solver import (Breakpoint, Event, EventKind, FlowTrajectory, Problem, next_event_time,
                     signed_restricted_lsq, solve_bregman, solve_euler_iss, solve_exact_iss)

__version__ = "0.1.0"
