"""Optimal linear response for random dynamical systems with reflecting bump noise."""
import os as _os

# OPTRESPONSE_THREADS caps BLAS threads; it only takes effect if set before numpy is first imported
if _os.environ.get("OPTRESPONSE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["OPTRESPONSE_THREADS"])

from .discretization import (Grid, KernelGrid, QuadratureSpec, TransferMatrix, assemble_transfer_matrix,
                             build_grid, discrete_inner_product, discrete_kernel_norm, discrete_l2_norm,
                             make_transfer_matrix, map_derivative_factor, project_observable)
from .dynamics import (MapModel, NoiseModel, affine, bump_noise, interval_exchange, kernel_value, make_map,
                       pomeau_manneville, reflect_fold, table_map)
from .errors import *  # noqa: F401,F403
from .optimal import (KernelFeasibility, MapFeasibility, kernel_feasibility, map_feasibility,
                      optimal_kernel_for_expectation, optimal_kernel_for_mixing, optimal_map_for_expectation,
                      optimal_map_for_mixing)
from .perturb import perturbed_map_operator, perturbed_operator
from .response import (KernelPerturbation, MapPerturbation, build_E_field, build_Ehat_field, build_H_field,
                       density_response_kernel, density_response_map, eigenvalue_response_kernel,
                       eigenvalue_response_map, expectation_derivative, mixing_rate_derivative)
from .spectral import (EigenPair, SpectralSet, invariant_density, mixing_check, resolvent_solve,
                       resolvent_solve_adjoint, spectral_set, subdominant_eigenpair)

__version__ = "0.1.0"
