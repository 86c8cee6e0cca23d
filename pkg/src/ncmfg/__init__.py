"""Solvers for first-order mean field games with triangular, possibly degenerate dynamics ``x' = a B(x)^T``."""

import os

# the bundled workqueue layer avoids probing for an optional TBB install
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .bfield import (
    BField,
    b_differentiability_probe,
    b_divergence,
    b_gradient,
    builtin_bfield,
    dp_hamiltonian,
    eval_matrix,
    hamiltonian,
)
from .control import (
    ControlPath,
    ControlProblem,
    ExtremalPath,
    OptimalSet,
    ShootingConfig,
    concatenation_check,
    cost,
    direct_minimize_oracle,
    feedback_flow,
    integrate_dynamics,
    pontryagin_rhs,
    solve_bvp_shooting,
    uniqueness_probe,
)
from .coupling import (
    CouplingSpec,
    MeasureCurve,
    ScenarioConfig,
    builtin_scenarios,
    c2_certify,
    eval_F,
    eval_G,
    mollified_density,
    scenario_by_name,
)
from .errors import NCMFGError
from .grid import BoxGrid
from .hjb import ValueFunction, numeric_b_gradient, regularity_report, solve_hjb, value_at
from .measure import (
    ParticleMeasure,
    d1_distance,
    density_estimate,
    integrate_against,
    push_forward,
    sample_initial,
    time_lipschitz_report,
)
from .mfg import MFGSolution, PicardConfig, picard_solve, stability_harness, verify_solution

__all__ = [name for name in dir() if not name.startswith("_")]
