"""Monte-Carlo Picard solver for stochastic fixed-point equations.

The unknown is the pair ``v = (u, grad u)`` of a semilinear parabolic PDE,
written as the fixed point of

    Phi(w)(t, x) = E[ g(X_T) Z_T + int_t^T f(r, X_r, w(r, X_r)) Z_r dr ]

with ``Z_s = (1, Y_s / (s - t))`` built from the derivative process of the
diffusion.  Modules:

    integrals     closed forms for the singular exponential integrals behind lambda*
    sde           Euler-Maruyama paths with the pathwise Jacobian
    bel           derivative weights Y and Z
    value         space-time grids, interpolation and the weighted sup-norm
    picard        the map Phi and the Picard loop
    verification  closed-form and manufactured benchmarks
    cli           the ``sfpe`` command
"""

from .errors import (DivergingIterationError, FailedSweepError, IllConditionedSigmaError,
                     InvalidArgumentError, OutOfRangeError, SFPEError)
from .integrals import (SingularIntegralQuery, bessel_bound, integral_check_suite, singular_exp_integral,
                        singular_exp_integral_bound, theta_integral)
from .sde import (CoefficientSet, PathBundle, TimeGrid, brownian, double_well, geometric, linear,
                  moment_bound_report_X_J, ornstein_uhlenbeck, simulate_paths)
from .bel import SigmaSolver, accumulate_Y, z_at, z_moment_report
from .value import (LyapunovV, ValueGrid, WeightedNormSpec, evaluate, load_grid, lyapunov_condition_probe,
                    save_grid, weighted_norm)
from .picard import (GridSpec, McConfig, Problem, SolveDiagnostics, apply_phi, contraction_factor,
                     contraction_probe, estimate_c_V, lambda_star, solve)
from .verification import BENCHMARKS, benchmark, compare_to_reference, manufactured_problem

__version__ = "0.1.0"
