"""Exception hierarchy shared by all modules."""


class SlipflowError(Exception):
    """Base class for all toolkit errors."""


class RangeViolation(SlipflowError):
    """Boundary profile leaves the admissible band (-1, 0)."""


class ConjugacyViolation(SlipflowError):
    """Fourier coefficients are not Hermitian-symmetric (non-real profile)."""


class DegenerateMap(SlipflowError):
    """Terrain-following map loses invertibility (layer depth too small)."""


class DomainError(SlipflowError):
    """Point outside the operator's domain of definition."""


class QuadratureGuard(SlipflowError):
    """Evaluation height below the kernel-quadrature accuracy guard."""


class SupportError(SlipflowError):
    """Boundary datum is not compactly supported on its grid."""


class SolverDiverged(SlipflowError):
    """Iterative saddle-point solve failed to meet the residual contract."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PicardDiverged(SlipflowError):
    """Nonlinear fixed-point iteration failed; driving too strong."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class OutOfDomain(SlipflowError):
    """Requested sample point or box is outside the discrete field."""


class SingularFit(SlipflowError):
    """Least-squares Gram matrix numerically singular (box too small)."""


class NonPositiveData(SlipflowError):
    """Log-log rate fit received non-positive data."""


class DegenerateBox(SlipflowError):
    """Box pair too close for the Caccioppoli ratio (under two grid cells)."""
