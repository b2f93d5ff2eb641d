"""Exact half-space Stokes machinery.

Three realizations of the same solution operator, used to cross-check each
other: the Poisson kernel with trapezoidal convolution for gridded
compactly supported data, the Dirichlet-to-Neumann (DN) Fourier multiplier,
and the periodic Fourier-series evaluator for torus traces.

All operations are pure; results are deterministic for a fixed mode order
(modes are iterated in sorted key order throughout).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, QuadratureGuard, SupportError

TWO_PI = 2.0 * np.pi


# ----------------------------------------------------------------------
# Poisson kernel
# ----------------------------------------------------------------------

def poisson_kernel_eval(y):
    """Velocity and pressure kernels of the half-space Stokes problem.

    For y = (y1, y2, y3) with y3 > 0:

        U(y) = 3 y3 / (2 pi (|y'|^2 + y3^2)^{5/2}) * (y_i y_j)_{ij}
        P(y) = -y3 / (pi (|y'|^2 + y3^2)^{3/2})

    Returns (U, P) with U a real 3x3 matrix. U is homogeneous of degree -2.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (3,):
        raise ValueError("y must be a 3-vector")
    if y[2] <= 0.0:
        raise DomainError("kernel defined for y3 > 0 only")
    rho2 = y[0] ** 2 + y[1] ** 2 + y[2] ** 2
    u = (3.0 * y[2] / (TWO_PI * rho2**2.5)) * np.outer(y, y)
    p = -y[2] / (np.pi * rho2**1.5)
    return u, float(p)


def _kernel_batch(dy1, dy2, y3):
    """U at displacements (dy1, dy2, y3) for fixed height; shape (..., 3, 3)."""
    rho2 = dy1**2 + dy2**2 + y3**2
    pref = 3.0 * y3 / (TWO_PI * rho2**2.5)
    out = np.empty(dy1.shape + (3, 3))
    comps = (dy1, dy2, np.full_like(dy1, y3))
    for i in range(3):
        for j in range(3):
            out[..., i, j] = pref * comps[i] * comps[j]
    return out


def poisson_solve(u0, grid_x, grid_y, eval_points):
    """Convolve a gridded compactly supported boundary datum with U.

    Parameters
    ----------
    u0 : array, shape (ny, nx, 3)
        Datum samples on the tensor grid ``grid_y x grid_x`` (uniform
        spacings).  Must vanish on the outermost ring of the grid.
    eval_points : array, shape (n, 3)
        Points with y3 at least twice the horizontal spacing (quadrature
        accuracy guard; the kernel steepens like 1/y3 near the boundary).

    Returns velocity values, shape (n, 3).  Trapezoidal quadrature over the
    support; declared error O(h^2) (faster for smooth compactly supported
    data).
    """
    u0 = np.asarray(u0, dtype=float)
    grid_x = np.asarray(grid_x, dtype=float)
    grid_y = np.asarray(grid_y, dtype=float)
    pts = np.atleast_2d(np.asarray(eval_points, dtype=float))
    hx = grid_x[1] - grid_x[0]
    hy = grid_y[1] - grid_y[0]
    edge = max(
        np.abs(u0[0, :, :]).max(), np.abs(u0[-1, :, :]).max(),
        np.abs(u0[:, 0, :]).max(), np.abs(u0[:, -1, :]).max(),
    )
    if edge > 1e-12 * max(np.abs(u0).max(), 1e-300):
        raise SupportError("datum does not vanish on the boundary ring of its grid")
    guard = 2.0 * max(hx, hy)
    if np.any(pts[:, 2] < guard):
        raise QuadratureGuard(f"evaluation heights must be >= {guard:.3g}")

    gx, gy = np.meshgrid(grid_x, grid_y)
    out = np.empty((pts.shape[0], 3))
    for n, (p1, p2, p3) in enumerate(pts):
        ker = _kernel_batch(p1 - gx, p2 - gy, p3)
        out[n] = np.einsum("abij,abj->i", ker, u0) * hx * hy
    return out


# ----------------------------------------------------------------------
# Dirichlet-to-Neumann symbol
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class DnSymbol:
    """DN symbol M and its singular part at one wavevector."""

    wavevector: tuple
    matrix: np.ndarray
    singular_part: np.ndarray


def _dn_matrix(x1, x2):
    """M(xi) for array-valued wavevector components (vectorized)."""
    mod = np.sqrt(x1 * x1 + x2 * x2)
    safe = np.where(mod == 0.0, 1.0, mod)
    m = np.zeros(np.shape(x1) + (3, 3), dtype=complex)
    m[..., 0, 0] = mod + x1 * x1 / safe
    m[..., 0, 1] = x1 * x2 / safe
    m[..., 0, 2] = 1j * x1
    m[..., 1, 0] = x1 * x2 / safe
    m[..., 1, 1] = mod + x2 * x2 / safe
    m[..., 1, 2] = 1j * x2
    m[..., 2, 0] = -1j * x1
    m[..., 2, 1] = -1j * x2
    m[..., 2, 2] = 2.0 * mod
    return m


def dn_symbol(xi):
    """DN symbol at a nonzero wavevector.

    M(xi) is Hermitian with smallest eigenvalue >= |xi| and
    Re <M(xi) w, w> >= |xi| |w|^2 for every complex w.
    """
    x1, x2 = float(xi[0]), float(xi[1])
    if x1 == 0.0 and x2 == 0.0:
        raise DomainError("DN symbol is singular at xi = 0 "
                          "(the periodic DN maps the zero mode to zero)")
    sing = np.array(
        [[0, 0, 1j * x1], [0, 0, 1j * x2], [-1j * x1, -1j * x2, 0]], dtype=complex
    )
    return DnSymbol(wavevector=(x1, x2), matrix=_dn_matrix(x1, x2), singular_part=sing)


# ----------------------------------------------------------------------
# Periodic traces
# ----------------------------------------------------------------------

class SpectralTrace:
    """Horizontal Fourier coefficients of a 3-component field on the torus.

    coeffs maps integer wavevectors (k1, k2) to complex 3-vectors b_k.
    Hermitian symmetry b_{-k} = conj(b_k) means the physical trace is real.
    """

    def __init__(self, coeffs):
        self.coeffs = {
            (int(k1), int(k2)): np.asarray(v, dtype=complex).reshape(3)
            for (k1, k2), v in coeffs.items()
        }

    @property
    def kmax(self):
        return max((max(abs(k1), abs(k2)) for (k1, k2) in self.coeffs), default=0)

    @property
    def zero_mode(self):
        return self.coeffs.get((0, 0), np.zeros(3, dtype=complex)).copy()

    def mode_arrays(self, drop_below=0.0):
        """Sorted wavevectors (m, 2) and amplitudes (m, 3); optional trimming."""
        keys = sorted(self.coeffs)
        ks = np.array(keys, dtype=int).reshape(-1, 2)
        amps = np.array([self.coeffs[k] for k in keys], dtype=complex).reshape(-1, 3)
        if drop_below > 0.0 and len(keys):
            scale = np.abs(amps).max()
            keep = np.abs(amps).max(axis=1) >= drop_below * scale
            keep |= (ks[:, 0] == 0) & (ks[:, 1] == 0)
            ks, amps = ks[keep], amps[keep]
        return ks, amps

    def hermitian_defect(self):
        worst = 0.0
        for (k1, k2), v in self.coeffs.items():
            w = self.coeffs.get((-k1, -k2), np.zeros(3, dtype=complex))
            worst = max(worst, float(np.abs(np.conj(v) - w).max()))
        return worst

    def require_hermitian(self, tol=1e-10):
        scale = max((np.abs(v).max() for v in self.coeffs.values()), default=0.0)
        if self.hermitian_defect() > tol * max(scale, 1.0):
            raise DomainError("trace coefficients are not Hermitian-symmetric")

    def l2_norm(self):
        """L2((0,2pi)^2) norm of the physical trace: (2 pi) * l2 of coefficients."""
        total = sum(float(np.sum(np.abs(v) ** 2)) for v in self.coeffs.values())
        return TWO_PI * np.sqrt(total)

    def to_grid(self, shape):
        """Synthesize the physical trace on a grid (indexed [i2, i1]).

        ``shape`` is either n (square) or a pair (n2, n1).
        """
        n2, n1 = (shape, shape) if np.isscalar(shape) else shape
        spec = np.zeros((n2, n1, 3), dtype=complex)
        for (k1, k2), v in self.coeffs.items():
            spec[k2 % n2, k1 % n1, :] += v
        return np.real(np.fft.ifft2(spec * n1 * n2, axes=(0, 1)))

    @classmethod
    def from_grid(cls, values, kmax=None, trim=1e-14):
        """Analyze grid samples (n2, n1, 3); keeps modes with |k| below Nyquist."""
        values = np.asarray(values, dtype=float)
        n2, n1 = values.shape[0], values.shape[1]
        spec = np.fft.fft2(values, axes=(0, 1)) / (n1 * n2)
        k1idx = np.fft.fftfreq(n1, d=1.0 / n1).astype(int)
        k2idx = np.fft.fftfreq(n2, d=1.0 / n2).astype(int) if n2 > 1 else np.array([0])
        cut1 = kmax if kmax is not None else max(n1 // 2 - 1, 0)
        cut2 = kmax if kmax is not None else max(n2 // 2 - 1, 0)
        scale = max(np.abs(spec).max(), 1e-300)
        coeffs = {}
        for i2 in range(n2):
            for i1 in range(n1):
                k1, k2 = int(k1idx[i1]), int(k2idx[i2])
                if abs(k1) > cut1 or abs(k2) > cut2:
                    continue
                v = spec[i2, i1]
                if np.abs(v).max() > trim * scale or (k1 == 0 and k2 == 0):
                    coeffs[(k1, k2)] = v
        return cls(coeffs)

    def to_json_dict(self):
        modes = [
            {"k": [k1, k2], "v": [[float(c.real), float(c.imag)] for c in v]}
            for (k1, k2), v in sorted(self.coeffs.items())
        ]
        return {"Kmax": int(self.kmax), "modes": modes}

    @classmethod
    def from_json_dict(cls, obj):
        coeffs = {}
        for m in obj["modes"]:
            k1, k2 = int(m["k"][0]), int(m["k"][1])
            coeffs[(k1, k2)] = np.array([complex(re, im) for re, im in m["v"]])
        return cls(coeffs)


def dn_apply_periodic(trace):
    """Apply the periodic DN operator mode-wise: b_k -> M(k) b_k, zero mode -> 0.

    The output is Hermitian-symmetric whenever the input is (real traction).
    """
    out = {}
    for (k1, k2), v in trace.coeffs.items():
        if k1 == 0 and k2 == 0:
            out[(0, 0)] = np.zeros(3, dtype=complex)
        else:
            out[(k1, k2)] = _dn_matrix(float(k1), float(k2)) @ v
    return SpectralTrace(out)


def dn_pairing(trace_a, trace_b=None):
    """<DN a, b> = (2 pi)^2 sum_k conj(b_k) . M(k) a_k (real for a = b)."""
    if trace_b is None:
        trace_b = trace_a
    total = 0.0 + 0.0j
    for (k1, k2), v in trace_a.coeffs.items():
        if k1 == 0 and k2 == 0:
            continue
        w = trace_b.coeffs.get((k1, k2))
        if w is None:
            continue
        total += np.vdot(w, _dn_matrix(float(k1), float(k2)) @ v)
    return TWO_PI**2 * total


# ----------------------------------------------------------------------
# Fourier-series half-space evaluator
# ----------------------------------------------------------------------

def _mode_profiles(ks, amps, heights):
    """Per-mode velocity/pressure profiles at the given heights.

    For k != 0 with c_k = b_{k,3} - i (k/|k|) . b'_k:

        v_k(y3) = b_k e^{-|k| y3} + (-i k1, -i k2, |k|) c_k y3 e^{-|k| y3}
        q_k(y3) = 2 |k| c_k e^{-|k| y3}

    The zero mode is constant in y3 with zero pressure.
    """
    heights = np.asarray(heights, dtype=float)
    kk = np.sqrt((ks**2).sum(axis=1)).astype(float)
    nz = kk > 0
    c = np.zeros(len(ks), dtype=complex)
    c[nz] = amps[nz, 2] - 1j * (ks[nz, 0] * amps[nz, 0] + ks[nz, 1] * amps[nz, 1]) / kk[nz]
    w = np.zeros((len(ks), 3), dtype=complex)
    w[:, 0] = -1j * ks[:, 0]
    w[:, 1] = -1j * ks[:, 1]
    w[:, 2] = kk
    decay = np.exp(-np.multiply.outer(heights, kk))          # (H, m)
    lin = decay * heights[:, None]                           # y3 e^{-|k| y3}
    vh = amps[None, :, :] * decay[:, :, None] + w[None, :, :] * (c[None, :] * lin)[:, :, None]
    qh = 2.0 * kk[None, :] * c[None, :] * decay
    qh[:, ~nz] = 0.0
    return vh, qh


class HalfspaceField:
    """Evaluation of the half-space extension of a periodic trace."""

    def __init__(self, trace, heights, grid_size):
        self.trace = trace
        self.heights = np.asarray(heights, dtype=float)
        self.ks, self.amps = trace.mode_arrays()
        self.vhat, self.qhat = _mode_profiles(self.ks, self.amps, self.heights)
        self.grid_size = grid_size

    def mode_profile(self, k):
        """(v_k(heights), q_k(heights)) for one wavevector."""
        idx = np.flatnonzero((self.ks[:, 0] == k[0]) & (self.ks[:, 1] == k[1]))
        if len(idx) == 0:
            return (np.zeros((len(self.heights), 3), dtype=complex),
                    np.zeros(len(self.heights), dtype=complex))
        return self.vhat[:, idx[0], :], self.qhat[:, idx[0]]

    def physical_fields(self):
        """Velocity (H, n, n, 3) and pressure (H, n, n) on the torus grid."""
        n = self.grid_size
        h = len(self.heights)
        vspec = np.zeros((h, n, n, 3), dtype=complex)
        qspec = np.zeros((h, n, n), dtype=complex)
        for m, (k1, k2) in enumerate(self.ks):
            vspec[:, k2 % n, k1 % n, :] += self.vhat[:, m, :]
            qspec[:, k2 % n, k1 % n] += self.qhat[:, m]
        vel = np.real(np.fft.ifft2(vspec * n * n, axes=(1, 2)))
        prs = np.real(np.fft.ifft2(qspec * n * n, axes=(1, 2)))
        return vel, prs

    def deviation_norms(self):
        """L2(torus) norm of v(., y3) - b_0 per height (Parseval, k != 0 only)."""
        nz = (self.ks[:, 0] != 0) | (self.ks[:, 1] != 0)
        return TWO_PI * np.sqrt(np.sum(np.abs(self.vhat[:, nz, :]) ** 2, axis=(1, 2)))


def halfspace_fourier_eval(trace, heights, grid_size=None):
    """Fourier-series half-space solution above a periodic trace.

    Heights must be >= 0; the boundary values are recovered exactly at
    y3 = 0, the zero mode is constant, and the pressure has zero mean on
    every height slice (the additive constant is fixed that way).
    """
    heights = np.asarray(heights, dtype=float)
    if np.any(heights < 0.0):
        raise DomainError("heights must be >= 0")
    if grid_size is None:
        grid_size = max(8, 2 * (trace.kmax + 1))
    return HalfspaceField(trace, heights, grid_size)
