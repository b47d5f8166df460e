"""Periodic homogenization of a diffusion across an interface.

Modules:

* :mod:`interhom.fields`  torus and interface drift fields, grids
* :mod:`interhom.cell`    invariant densities, correctors and effective tensors
* :mod:`interhom.strip`   invariant measure on the strip, ``q``, ``p``, ``alpha``
* :mod:`interhom.sde`     Monte Carlo for the microscopic process
* :mod:`interhom.limit`   the limiting skew process and martingale checks
* :mod:`interhom.cli`     configuration and pipeline
"""

from .errors import *  # noqa: F401,F403
from .fields import (FourierTerm, GridSpec, InterfaceDriftField, TorusField, blend, bump,
                     check_centering, eval_drift, field_from_dict, make_interface_field)
from .cell import CellSolution, discretize_generator, solve_cell, solve_corrector, \
    solve_invariant_density
from .strip import (InterfaceParams, StripMeasure, assemble_interface_params, compute_alpha,
                    compute_p, extract_q, params_from_values, solve_strip_measure)
from .sde import (PathEstimate, SimConfig, brownian_occupation, estimate_alpha_longrun,
                  estimate_exit_probs, estimate_tangential_drift, hitting_time,
                  interface_occupation_stats, rescaled_state, simulate_path, simulate_terminal)
from .limit import (GluingTestFunction, LimitScheme, compare_laws, make_gluing_test_function,
                    simulate_limit, simulate_limit_path, simulate_skew_first,
                    skew_exit_probability, verify_martingale_problem)

__version__ = "0.1.0"
