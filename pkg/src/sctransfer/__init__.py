"""Self-consistent transfer operators for mean-field coupled maps.

Submodules
----------
densities         grid densities, signed functions, atomic measures, norms
maps              circle/interval maps, coupling kernels, mean-field diffeomorphisms
transfer_ops      Ulam matrices, noise kernels, linear fixed densities
self_consistent   the nonlinear operator and its fixed-point solvers
analysis          Lasota-Yorke fits, decay rates, contraction matrices
response          resolvent, derivative terms, linear and finite-difference response
optimal_coupling  response gradients and constrained maximization
particle_sim      direct N-agent simulation
cli               JSON-configured experiment runner
"""
from .densities import AtomicMeasure, GridDensity, SignedGridFunction, norm
from .errors import (ConfigurationError, DomainError, NonContraction, NumericalError,
                     RegimeError, SCTError, SpectralGapError)
from .maps import CircleMap, CouplingKernel, MeanFieldDiffeo, get_kernel, get_map
from .self_consistent import (SelfConsistentModel, SystemClass, apply_self_consistent,
                              picard_fixed_point, thm_existence_iteration)
from .transfer_ops import NoiseKernel, TransferMatrix, linear_fixed_density, ulam_matrix

__version__ = "0.1.0"

__all__ = [
    "AtomicMeasure", "GridDensity", "SignedGridFunction", "norm",
    "SCTError", "ConfigurationError", "DomainError", "RegimeError", "NumericalError",
    "NonContraction", "SpectralGapError",
    "CircleMap", "CouplingKernel", "MeanFieldDiffeo", "get_kernel", "get_map",
    "SelfConsistentModel", "SystemClass", "apply_self_consistent",
    "picard_fixed_point", "thm_existence_iteration",
    "NoiseKernel", "TransferMatrix", "linear_fixed_density", "ulam_matrix",
]
