"""Numerical laboratory for coupled quadratic FBSDEs with non-Lipschitz drifts.

Decoupling-field PDE solves, Euler-Maruyama Monte Carlo, Feynman-Kac
reconstruction, explicit Malliavin derivatives, local-time integrals, the
Zvonkin transform, density bounds and indifference pricing.
"""

from .exceptions import *  # noqa: F401,F403
from .models import (CoefficientSet, ModelInstance, builtin_ou, builtin_pricing_model,
                     builtin_regime_switching, builtin_worked_example, load_model,
                     model_from_dict, ramp_payoff, sigmoid)
from .pde import (DecouplingField, GridFunction, SolverConfig, SpaceTimeGrid,
                  gradient_and_hessian, solve_decoupling_field, solve_kolmogorov_U,
                  transformed_drift)
from .sde import PathEnsemble, girsanov_weight, simulate_forward, time_reversed_paths
from .feynman_kac import (TripleEnsemble, bsde_residual, comonotonicity_check,
                          comparison_check, reconstruct_triple)

__version__ = "0.1.0"
