"""Effective Navier-slip toolkit for viscous flow over periodic bumpy walls.

Computes boundary-layer correctors on the strip below a rough periodic
boundary (with an exact Dirichlet-to-Neumann transparent condition on top),
extracts slip vectors and the effective slip tensor, solves shear-driven
(Navier-)Stokes channel flows over the same walls, and measures multiscale
box-averaged residuals against shear / corrector / Navier-polynomial spans.
"""

__version__ = "0.1.0"

from .errors import (
    ConjugacyViolation,
    DegenerateBox,
    DegenerateMap,
    DomainError,
    NonPositiveData,
    OutOfDomain,
    PicardDiverged,
    QuadratureGuard,
    RangeViolation,
    SingularFit,
    SlipflowError,
    SolverDiverged,
    SupportError,
)
from .geometry import BoundaryFunction, BumpyBox, TerrainMap, build_boundary, terrain_map
from .halfspace import (
    DnSymbol,
    SpectralTrace,
    dn_apply_periodic,
    dn_symbol,
    halfspace_fourier_eval,
    poisson_kernel_eval,
    poisson_solve,
)
from .cell import (
    CorrectorSolution,
    SlipMatrix,
    decay_fit,
    energy_slip_identity,
    extend_to_halfspace,
    slip_matrix,
    slip_vector,
    solve_corrector,
)
from .channel import ChannelSolution, evaluate, solve_channel, weak_residual
from .analysis import (
    ScaleReport,
    box_average_l2,
    caccioppoli_ratio,
    corrector_scaling_check,
    fit_slip_coefficients,
    navier_polynomial_field,
    rate_fit,
    scale_scan,
)

__all__ = [
    "__version__",
    "SlipflowError", "RangeViolation", "ConjugacyViolation", "DegenerateMap",
    "DomainError", "QuadratureGuard", "SupportError", "SolverDiverged",
    "PicardDiverged", "OutOfDomain", "SingularFit", "NonPositiveData",
    "DegenerateBox",
    "BoundaryFunction", "BumpyBox", "TerrainMap", "build_boundary", "terrain_map",
    "SpectralTrace", "DnSymbol", "poisson_kernel_eval", "poisson_solve",
    "dn_symbol", "dn_apply_periodic", "halfspace_fourier_eval",
    "CorrectorSolution", "SlipMatrix", "solve_corrector", "extend_to_halfspace",
    "slip_vector", "slip_matrix", "energy_slip_identity", "decay_fit",
    "ChannelSolution", "solve_channel", "weak_residual", "evaluate",
    "ScaleReport", "box_average_l2", "fit_slip_coefficients", "scale_scan",
    "rate_fit", "corrector_scaling_check", "navier_polynomial_field",
    "caccioppoli_ratio",
]
