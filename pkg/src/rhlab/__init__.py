"""rhlab: a desk-scale laboratory for lattice elliptic equations with random coefficients.

Builds random environments (Gaussian fields and long-range convolution
fields), turns them into uniformly elliptic coefficient fields, solves the
divergence-form equation on the torus, and runs the Monte Carlo experiments
that probe homogenization rates and averaged Green's function decay.
"""

__version__ = "0.1.0"

from .lattice import (TorusLattice, ScalarField, VectorField, gradient,
                      divergence, apply_operator, constant_field, delta_field)
from .fields import (EnvironmentSpec, Kernel, CorrelationProfile, build_kernel,
                     convolve_env, estimate_correlation, replica_rng,
                     sample_massive_gff, sample_massless_gff, sample_white_noise)
from .coeffs import (CoefficientField, CoefficientMap, contrast_ratio,
                     diagonal_map, evaluate_map, identity_coefficients,
                     isotropic_map, laminate_field)
from .solver import (ConvergenceError, RichardsonTrace, SolveReport, solve_cg,
                     solve_const, solve_richardson)
from .homogenize import (CorrectorSet, HomogenizedEstimate, corrector_set,
                         estimate_ahom, extrapolate_eta, solve_corrector)
from .greens import (GreenEstimate, averaged_green, fit_decay,
                     hom_green_continuum, lattice_green)
from .stats import (Accumulator, FitDegenerateError, RateFit, accumulate,
                    bootstrap_ci, fit_power_offset, loglog_fit)
