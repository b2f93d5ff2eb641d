"""Shared saddle-point engine for the strip and channel Stokes problems.

Discretization: Fourier collocation in the periodic horizontal directions,
second-order finite differences on a (optionally stretched) vertical grid,
velocity at sigma levels and pressure staggered at mid-levels.  The
stiffness block is assembled in quadrature form A = G^T W G from the
terrain-following gradient G, so it is symmetric by construction; the
divergence constraint uses the conservative flux form, which makes the
total top flux telescope exactly (discrete zero-flux identities hold to
solver tolerance, not just to discretization error).

The Dirichlet-to-Neumann top condition of the strip problem enters weakly
through its Fourier-multiplier quadratic form.

Variable-coefficient solves use flexible GMRES preconditioned by the exact
direct factorization of the flat-wall operator, which decouples into small
banded systems per horizontal mode (grouped by |k| after rotating the
horizontal velocity into longitudinal/transverse components).  For a flat
wall the preconditioner is the operator itself and the solve converges
immediately.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

from .errors import SolverDiverged

_gbtrf, _gbtrs = get_lapack_funcs(("gbtrf", "gbtrs"), (np.empty(0, dtype=complex),))


def _stretch_nodes(nz, amount):
    """Vertical nodes sigma_m in [0, 1], clustered near sigma = 0 for amount > 0."""
    zeta = np.linspace(0.0, 1.0, nz + 1)
    if amount <= 0.0:
        return zeta
    return 1.0 - np.tanh(amount * (1.0 - zeta)) / np.tanh(amount)


class MappedGrid:
    """Terrain-following tensor grid shared by the strip and channel solvers.

    kind 'strip': torus (0, 2pi)^2, depth rho = -gamma, sigma map with DN top.
    kind 'channel': lateral box (0, L)^2, unit Jacobian shear map, Dirichlet top.
    """

    def __init__(self, kind, n1, n2, nz, lateral_period, rho, e_hor1, e_hor2,
                 stretch=0.0):
        self.kind = kind
        self.n1, self.n2, self.nz = int(n1), int(n2), int(nz)
        self.L = float(lateral_period)
        self.h1 = self.L / self.n1
        self.h2 = self.L / self.n2
        self.area = self.L * self.L
        self.rho = np.broadcast_to(np.asarray(rho, dtype=float), (self.n2, self.n1))
        self.e_hor = (
            np.broadcast_to(np.asarray(e_hor1, dtype=float), (self.n2, self.n1)),
            np.broadcast_to(np.asarray(e_hor2, dtype=float), (self.n2, self.n1)),
        )
        self.has_dn = kind == "strip"
        self.dirichlet_top = kind == "channel"

        self.dzeta = 1.0 / self.nz
        self.sigma = _stretch_nodes(self.nz, stretch)
        # discrete vertical metric: mid values/derivatives from node values,
        # used consistently everywhere (keeps the algebraic identities exact)
        self.sigma_mid = 0.5 * (self.sigma[1:] + self.sigma[:-1])
        self.dsigma_mid = (self.sigma[1:] - self.sigma[:-1]) / self.dzeta

        if kind == "strip":
            self.e_vert_node = 1.0 - self.sigma
            self.e_vert_mid = 1.0 - self.sigma_mid
        else:
            self.e_vert_node = np.ones(self.nz + 1)
            self.e_vert_mid = np.ones(self.nz)

        # wavenumbers with the Nyquist column zeroed (keeps D real-skew-adjoint)
        def wavenumbers(n):
            k = 2.0 * np.pi * np.fft.fftfreq(n, d=self.L / n)
            if n % 2 == 0:
                k[n // 2] = 0.0
            return k

        self.kx = wavenumbers(self.n1)
        self.ky = wavenumbers(self.n2)

        # quadrature weight profile and metric factors at mid-levels
        self.c3_mid = 1.0 / (self.rho[None] * self.dsigma_mid[:, None, None])
        self.w_mid = (self.rho[None] * self.dsigma_mid[:, None, None]
                      * self.dzeta * self.h1 * self.h2)
        # horizontal-metric factor of the mapped gradient
        self.b_mid = tuple(
            self.e_vert_mid[:, None, None] * self.e_hor[i][None] * self.c3_mid
            for i in range(2)
        )

        if self.dirichlet_top:
            self.unknown_levels = np.arange(1, self.nz)
        else:
            self.unknown_levels = np.arange(1, self.nz + 1)
        self.n_unki = len(self.unknown_levels)
        self.ndof_v = 3 * self.n_unki * self.n2 * self.n1
        self.ndof_q = self.nz * self.n2 * self.n1
        self.ndof = self.ndof_v + self.ndof_q

        if self.has_dn:
            kxg, kyg = np.meshgrid(self.kx, self.ky)
            from .halfspace import _dn_matrix

            m = _dn_matrix(kxg, kyg)
            m[0, 0] = 0.0
            self.dn_matrix_grid = m
        else:
            self.dn_matrix_grid = None

    # -- spectral horizontal derivatives (real transforms, Nyquist zeroed) ----

    @property
    def _ikx_half(self):
        return 1j * self.kx[: self.n1 // 2 + 1]

    def dx1(self, f):
        return sfft.irfft(sfft.rfft(f, axis=-1) * self._ikx_half, n=self.n1, axis=-1)

    def dx2(self, f):
        if self.n2 == 1:
            return np.zeros_like(f)
        spec = sfft.rfft(f, axis=-2)
        iky = (1j * self.ky[: self.n2 // 2 + 1])[:, None]
        return sfft.irfft(spec * iky, n=self.n2, axis=-2)

    def hgrad(self, f):
        """Both horizontal derivatives through one forward transform."""
        spec = sfft.rfft2(f, axes=(-2, -1))
        d1 = sfft.irfft2(spec * self._ikx_half, axes=(-2, -1), s=(self.n2, self.n1))
        if self.n2 == 1:
            return d1, np.zeros_like(f)
        d2 = sfft.irfft2(spec * (1j * self.ky)[:, None], axes=(-2, -1),
                         s=(self.n2, self.n1))
        return d1, d2

    def hdiv(self, f1, f2):
        """d1 f1 + d2 f2 through one inverse transform."""
        spec = sfft.rfft2(f1, axes=(-2, -1)) * self._ikx_half
        if self.n2 > 1:
            spec = spec + sfft.rfft2(f2, axes=(-2, -1)) * (1j * self.ky)[:, None]
        return sfft.irfft2(spec, axes=(-2, -1), s=(self.n2, self.n1))

    # -- vertical staggering ---------------------------------------------------

    def avg(self, v):
        return 0.5 * (v[1:] + v[:-1])

    def dif(self, v):
        return (v[1:] - v[:-1]) / self.dzeta

    def avg_t(self, z):
        out = np.zeros((self.nz + 1,) + z.shape[1:])
        out[:-1] += 0.5 * z
        out[1:] += 0.5 * z
        return out

    def dif_t(self, z):
        out = np.zeros((self.nz + 1,) + z.shape[1:])
        out[:-1] -= z / self.dzeta
        out[1:] += z / self.dzeta
        return out


class MappedStokesOperator:
    """Matrix-free symmetric saddle operator on a :class:`MappedGrid`."""

    def __init__(self, grid):
        self.g = grid

    # -- state packing --------------------------------------------------------

    def pack(self, vu, q):
        return np.concatenate([vu.ravel(), q.ravel()])

    def unpack(self, x):
        g = self.g
        vu = x[: g.ndof_v].reshape(3, g.n_unki, g.n2, g.n1)
        q = x[g.ndof_v:].reshape(g.nz, g.n2, g.n1)
        return vu, q

    def embed(self, vu, bottom=None, top=None):
        """Velocity unknowns + boundary data -> full level arrays (3, nz+1, n2, n1)."""
        g = self.g
        vfull = np.zeros((3, g.nz + 1, g.n2, g.n1))
        vfull[:, g.unknown_levels] = vu
        if bottom is not None:
            vfull[:, 0] = bottom
        if top is not None and g.dirichlet_top:
            vfull[:, g.nz] = top
        return vfull

    def restrict(self, mom_full):
        return mom_full[:, self.g.unknown_levels]

    # -- mapped gradient and its adjoint --------------------------------------

    def grad_mid(self, vc):
        """Physical gradient of one component at mid-levels: (3, nz, n2, n1)."""
        g = self.g
        vbar = g.avg(vc)
        dv = g.dif(vc)
        out = np.empty((3, g.nz, g.n2, g.n1))
        d1, d2 = g.hgrad(vbar)
        out[0] = d1 + g.b_mid[0] * dv
        out[1] = d2 + g.b_mid[1] * dv
        out[2] = g.c3_mid * dv
        return out

    def grad_mid_t(self, z):
        """Adjoint of grad_mid: (3, nz, n2, n1) -> full level array."""
        g = self.g
        horiz = -g.hdiv(z[0], z[1])
        vert = g.b_mid[0] * z[0] + g.b_mid[1] * z[1] + g.c3_mid * z[2]
        return g.avg_t(horiz) + g.dif_t(vert)

    # -- conservative divergence and its adjoint -------------------------------

    def div(self, vfull):
        """Mapped divergence at mid-levels (conservative flux form)."""
        g = self.g
        horiz = g.hdiv(g.rho[None] * g.avg(vfull[0]),
                       g.rho[None] * g.avg(vfull[1])) / g.rho[None]
        w = (vfull[2] + g.e_vert_node[:, None, None]
             * (g.e_hor[0][None] * vfull[0] + g.e_hor[1][None] * vfull[1]))
        return horiz + g.c3_mid * g.dif(w)

    def div_t(self, q):
        """Adjoint of div: mid array -> full level array (3, nz+1, n2, n1)."""
        g = self.g
        out = np.empty((3, g.nz + 1, g.n2, g.n1))
        qr = q / g.rho[None]
        d1, d2 = g.hgrad(qr)
        out[0] = g.avg_t(-g.rho[None] * d1)
        out[1] = g.avg_t(-g.rho[None] * d2)
        z = g.dif_t(g.c3_mid * q)
        out[2] = z
        ev = g.e_vert_node[:, None, None]
        out[0] += ev * g.e_hor[0][None] * z
        out[1] += ev * g.e_hor[1][None] * z
        return out

    # -- DN quadratic form ------------------------------------------------------

    def dn_apply_top(self, vtop):
        """Weak DN contribution at the top trace: (3, n2, n1) -> same shape."""
        g = self.g
        spec = np.fft.fft2(vtop, axes=(-2, -1))
        mixed = np.einsum("yxij,jyx->iyx", g.dn_matrix_grid, spec)
        phys = np.fft.ifft2(mixed, axes=(-2, -1)).real
        return phys * (g.area / (g.n1 * g.n2))

    # -- full forms --------------------------------------------------------------

    def forms(self, vfull, q):
        """Momentum rows on all levels and (negated) constraint rows."""
        g = self.g
        mom = np.empty_like(vfull)
        for c in range(3):
            gc = self.grad_mid(vfull[c])
            mom[c] = self.grad_mid_t(g.w_mid * gc)
        if g.has_dn:
            mom[:, g.nz] += self.dn_apply_top(vfull[:, g.nz])
        mom -= self.div_t(q)
        con = -self.div(vfull)
        return mom, con

    def apply(self, x):
        vu, q = self.unpack(x)
        mom, con = self.forms(self.embed(vu), q)
        return self.pack(self.restrict(mom), con)

    def rhs_from_data(self, bottom=None, top=None, force_mid=None):
        """Right-hand side from Dirichlet data and an optional mid-level force."""
        g = self.g
        lift = self.embed(np.zeros((3, g.n_unki, g.n2, g.n1)), bottom=bottom, top=top)
        mom, con = self.forms(lift, np.zeros((g.nz, g.n2, g.n1)))
        rhs_mom = -self.restrict(mom)
        rhs_con = -con
        if force_mid is not None:
            pair = np.empty((3, g.nz + 1, g.n2, g.n1))
            for c in range(3):
                pair[c] = g.avg_t(g.w_mid * force_mid[c])
            rhs_mom += self.restrict(pair)
        return self.pack(rhs_mom, rhs_con)

    def force_functional(self, force_pair):
        """Pair (f_mid, tensor_mid) -> momentum rhs vector.

        ``f_mid`` pairs with the test function itself; ``tensor_mid`` (shape
        (3, 3, nz, n2, n1), [component, direction]) pairs with its gradient.
        """
        g = self.g
        rhs_mom = np.zeros((3, g.nz + 1, g.n2, g.n1))
        f_mid, tensor_mid = force_pair
        if f_mid is not None:
            for c in range(3):
                rhs_mom[c] += g.avg_t(g.w_mid * f_mid[c])
        if tensor_mid is not None:
            for c in range(3):
                rhs_mom[c] += self.grad_mid_t(g.w_mid * tensor_mid[c])
        return self.pack(self.restrict(rhs_mom), np.zeros((g.nz, g.n2, g.n1)))

    # -- physical diagnostics ------------------------------------------------------

    def residual_diagnostics(self, x, rhs):
        g = self.g
        r = rhs - self.apply(x)
        ru, rq = self.unpack(r)
        scale = max(np.linalg.norm(rhs), 1e-300)
        diag = {
            "momentum_residual": float(np.linalg.norm(ru) / scale),
            "divergence_residual": float(np.abs(rq).max()),
        }
        if g.has_dn:
            top_row = np.flatnonzero(g.unknown_levels == g.nz)
            diag["dn_residual"] = float(np.linalg.norm(ru[:, top_row]) / scale)
        return diag


# ---------------------------------------------------------------------------
# Flat-wall per-mode preconditioner
# ---------------------------------------------------------------------------

class _BatchTridiag:
    """Vectorized Thomas solver for many tridiagonal systems at once."""

    def __init__(self, lower, diag, upper):
        n = diag.shape[1]
        self.n = n
        cp = np.empty_like(upper, dtype=complex)
        den = diag[:, 0].astype(complex).copy()
        self.den = np.empty_like(diag, dtype=complex)
        self.den[:, 0] = den
        for i in range(1, n):
            cp[:, i - 1] = upper[:, i - 1] / self.den[:, i - 1]
            self.den[:, i] = diag[:, i] - lower[:, i - 1] * cp[:, i - 1]
        self.cp = cp
        self.lower = lower

    def solve(self, b):
        n = self.n
        x = np.empty_like(b, dtype=complex)
        x[:, 0] = b[:, 0] / self.den[:, 0]
        for i in range(1, n):
            x[:, i] = (b[:, i] - self.lower[:, i - 1] * x[:, i - 1]) / self.den[:, i]
        for i in range(n - 2, -1, -1):
            x[:, i] -= self.cp[:, i] * x[:, i + 1]
        return x


class FlatModePreconditioner:
    """Exact direct solver of the flat-wall operator, applied mode by mode.

    Horizontal velocity is rotated into longitudinal/transverse parts so the
    per-mode blocks depend on the wavevector only through |k|; transverse
    components reduce to batched tridiagonal solves and the coupled
    (longitudinal, vertical, pressure) block to banded LU factorizations
    shared by all modes with the same |k|.
    """

    KL = 5

    def __init__(self, grid):
        g = grid
        self.g = g
        self.rho_bar = float(np.mean(g.rho))
        self.wbar = self.rho_bar * g.dsigma_mid * g.dzeta * g.area
        self.c3 = 1.0 / (self.rho_bar * g.dsigma_mid)

        nzp = g.nz + 1
        avg = np.zeros((g.nz, nzp))
        dif = np.zeros((g.nz, nzp))
        idx = np.arange(g.nz)
        avg[idx, idx] = 0.5
        avg[idx, idx + 1] = 0.5
        dif[idx, idx] = -1.0 / g.dzeta
        dif[idx, idx + 1] = 1.0 / g.dzeta
        self._avg_full, self._dif_full = avg, dif

        u = g.unknown_levels
        a_u = avg[:, u]
        d_u = dif[:, u]
        s_mass = a_u.T @ (self.wbar[:, None] * a_u)
        s_stif = d_u.T @ ((self.wbar * self.c3**2)[:, None] * d_u)
        nu = len(u)
        self.nu = nu
        self.top_pos = nu - 1 if not g.dirichlet_top else None

        # transverse / scalar block diagonals as polynomials in kappa
        def tridiag_parts(m):
            return (np.diag(m, -1).copy(), np.diag(m).copy(), np.diag(m, 1).copy())

        self._t_stif = tridiag_parts(s_stif)
        self._t_mass = tridiag_parts(s_mass)

        # mode bookkeeping: nonzero modes sorted by |k|^2 so the per-group
        # banded solves work on contiguous column blocks
        kxg, kyg = np.meshgrid(g.kx, g.ky)
        self.kap = np.hypot(kxg, kyg).ravel()
        self.kx_flat = kxg.ravel()
        self.ky_flat = kyg.ravel()
        self.nonzero = self.kap > 0.0
        scale2 = (2.0 * np.pi / g.L) ** 2
        key = np.rint(self.kap**2 / scale2).astype(np.int64)
        nz_idx = np.flatnonzero(self.nonzero)
        order = np.argsort(key[nz_idx], kind="stable")
        self.mode_perm = nz_idx[order]
        sorted_keys = key[self.mode_perm]
        bounds = np.flatnonzero(np.diff(sorted_keys)) + 1
        starts = np.concatenate([[0], bounds])
        stops = np.concatenate([bounds, [len(sorted_keys)]])
        self.group_slices = [
            (int(sorted_keys[a]), int(a), int(b)) for a, b in zip(starts, stops)
        ]

        self._build_lp_templates(a_u, d_u)
        self._factor_groups(scale2)
        self._factor_zero_mode(a_u, d_u)
        self._build_tridiag_cache()

    # -- coupled (longitudinal, vertical, pressure) block -------------------------

    def _lp_index(self):
        """Interleaved dof order: q_m, then the unknown level above it."""
        g = self.g
        order = []
        for m in range(g.nz):
            order.append(("q", m))
            lvl = m + 1
            if lvl in set(g.unknown_levels.tolist()):
                order.append(("L", lvl))
                order.append(("3", lvl))
        pos = {tag: i for i, tag in enumerate(order)}
        return order, pos

    def _build_lp_templates(self, a_u, d_u):
        g = self.g
        order, pos = self._lp_index()
        n = len(order)
        self.n_lp = n
        self.lp_pos = pos
        c0 = np.zeros((n, n), dtype=complex)
        c1 = np.zeros((n, n), dtype=complex)
        c2 = np.zeros((n, n), dtype=complex)
        u = g.unknown_levels
        lvl_pos_l = {int(l): pos[("L", int(l))] for l in u}
        lvl_pos_3 = {int(l): pos[("3", int(l))] for l in u}

        s_mass = a_u.T @ (self.wbar[:, None] * a_u)
        s_stif = d_u.T @ ((self.wbar * self.c3**2)[:, None] * d_u)
        for i, li in enumerate(u):
            for j, lj in enumerate(u):
                if s_mass[i, j] == 0.0 and s_stif[i, j] == 0.0:
                    continue
                for lvl_pos in (lvl_pos_l, lvl_pos_3):
                    c2[lvl_pos[int(li)], lvl_pos[int(lj)]] += s_mass[i, j]
                    c0[lvl_pos[int(li)], lvl_pos[int(lj)]] += s_stif[i, j]
        if g.has_dn:
            f = g.area
            tl, t3 = lvl_pos_l[g.nz], lvl_pos_3[g.nz]
            c1[tl, tl] += 2.0 * f
            c1[t3, t3] += 2.0 * f
            c1[tl, t3] += 1j * f
            c1[t3, tl] += -1j * f
        # divergence coupling: (B v)_m = i kappa (A v_L)_m + c3_m (D v_3)_m
        for m in range(g.nz):
            qi = pos[("q", m)]
            for j, lj in enumerate(u):
                if a_u[m, j] != 0.0:
                    c1[qi, lvl_pos_l[int(lj)]] += -1j * a_u[m, j]
                    c1[lvl_pos_l[int(lj)], qi] += 1j * a_u[m, j]
                if d_u[m, j] != 0.0:
                    val = -self.c3[m] * d_u[m, j]
                    c0[qi, lvl_pos_3[int(lj)]] += val
                    c0[lvl_pos_3[int(lj)], qi] += val
        self._lp_c = (c0, c1, c2)
        kl = self.KL
        i_idx, j_idx = np.nonzero(np.ones((n, n)))
        keep = np.abs(i_idx - j_idx) <= kl
        self._band_i = i_idx[keep]
        self._band_j = j_idx[keep]

    def _to_banded(self, mat):
        kl = self.KL
        ab = np.zeros((2 * kl + kl + 1, self.n_lp), dtype=complex)
        ab[2 * kl + self._band_i - self._band_j, self._band_j] = mat[self._band_i, self._band_j]
        return ab

    def _factor_groups(self, scale2):
        c0, c1, c2 = self._lp_c
        self.lp_factors = {}
        for key, _, _ in self.group_slices:
            kap = np.sqrt(scale2 * key)
            mat = c0 + kap * c1 + (kap * kap) * c2
            ab = self._to_banded(mat)
            lu, ipiv, info = _gbtrf(ab, self.KL, self.KL)
            if info != 0:
                raise SolverDiverged(f"flat-block factorization failed (|k|^2 key {key})")
            self.lp_factors[key] = (lu, ipiv)

    def _factor_zero_mode(self, a_u, d_u):
        """(v3, q) coupling at kappa = 0 (pressure pinned for the channel)."""
        g = self.g
        nu = self.nu
        n = nu + g.nz
        m = np.zeros((n, n))
        s_stif = d_u.T @ ((self.wbar * self.c3**2)[:, None] * d_u)
        m[:nu, :nu] = s_stif
        bmat = self.c3[:, None] * d_u
        m[nu:, :nu] = -bmat
        m[:nu, nu:] = -bmat.T
        if g.dirichlet_top:
            p = nu
            m[p, :] = 0.0
            m[:, p] = 0.0
            m[p, p] = 1.0
        self._zero_lu = lu_factor(m)

    def _build_tridiag_cache(self):
        """One batched tridiagonal factorization per horizontal component/mode."""
        kap = self.kap
        low = self._t_stif[0][None, :] + kap[:, None] ** 2 * self._t_mass[0][None, :]
        dia = self._t_stif[1][None, :] + kap[:, None] ** 2 * self._t_mass[1][None, :]
        upp = self._t_stif[2][None, :] + kap[:, None] ** 2 * self._t_mass[2][None, :]
        if self.g.has_dn:
            dia[:, self.top_pos] += self.g.area * kap
        self._t_solver = _BatchTridiag(low, dia, upp)
        self._t_solver_zero = _BatchTridiag(
            self._t_stif[0][None, :], self._t_stif[1][None, :], self._t_stif[2][None, :]
        )

    # -- application ---------------------------------------------------------------

    def apply(self, x):
        g = self.g
        nu = self.nu
        vu = x[: g.ndof_v].reshape(3, nu, g.n2, g.n1)
        q = x[g.ndof_v:].reshape(g.nz, g.n2, g.n1)
        ntot = g.n1 * g.n2

        vhat = sfft.fft2(vu, axes=(-2, -1)).reshape(3, nu, ntot) * ntot
        qhat = sfft.fft2(q, axes=(-2, -1)).reshape(g.nz, ntot) * ntot

        kap = self.kap
        nzm = self.nonzero
        ex = np.zeros_like(kap)
        ey = np.zeros_like(kap)
        ex[nzm] = self.kx_flat[nzm] / kap[nzm]
        ey[nzm] = self.ky_flat[nzm] / kap[nzm]

        v_l = ex * vhat[0] + ey * vhat[1]
        v_t = -ey * vhat[0] + ex * vhat[1]
        v_t[:, ~nzm] = 0.0

        # transverse solve batched over every mode; zero-kappa modes reuse the
        # same tridiagonal solver for both raw horizontal components
        sol_t = self._t_solver.solve(v_t.T).T
        zmodes = np.flatnonzero(~nzm)
        sol1_zero = self._t_solver_zero.solve(vhat[0][:, zmodes].T).T
        sol2_zero = self._t_solver_zero.solve(vhat[1][:, zmodes].T).T

        # coupled block, grouped by |k| over contiguous permuted columns
        y_l = np.zeros_like(v_l)
        y_3 = np.zeros_like(v_l)
        y_q = np.zeros_like(qhat)
        pos = self.lp_pos
        l_rows = np.array([pos[("L", int(l))] for l in self.g.unknown_levels])
        r3_rows = np.array([pos[("3", int(l))] for l in self.g.unknown_levels])
        q_rows = np.array([pos[("q", m)] for m in range(g.nz)])
        perm = self.mode_perm
        rhs_all = np.empty((self.n_lp, len(perm)), dtype=complex, order="F")
        rhs_all[l_rows] = v_l[:, perm]
        rhs_all[r3_rows] = vhat[2][:, perm]
        rhs_all[q_rows] = qhat[:, perm]
        sol_all = np.empty_like(rhs_all)
        for key, a, b in self.group_slices:
            lu, ipiv = self.lp_factors[key]
            sol, info = _gbtrs(lu, self.KL, self.KL, rhs_all[:, a:b], ipiv)
            sol_all[:, a:b] = sol
        y_l[:, perm] = sol_all[l_rows]
        y_3[:, perm] = sol_all[r3_rows]
        y_q[:, perm] = sol_all[q_rows]

        if len(zmodes):
            nzero = len(zmodes)
            rhs0 = np.zeros((nu + g.nz, nzero), dtype=complex)
            rhs0[:nu] = vhat[2][:, zmodes]
            rhs0[nu:] = qhat[:, zmodes]
            if g.dirichlet_top:
                rhs0[nu] = 0.0
            sol0 = lu_solve(self._zero_lu, rhs0)
            y_3[:, zmodes] = sol0[:nu]
            y_q[:, zmodes] = sol0[nu:]

        out1 = ex * y_l - ey * sol_t
        out2 = ey * y_l + ex * sol_t
        out1[:, zmodes] = sol1_zero
        out2[:, zmodes] = sol2_zero

        def to_phys(a, lead):
            spec = a.reshape(lead, g.n2, g.n1)
            return sfft.ifft2(spec, axes=(-2, -1)).real / ntot

        z = np.concatenate([
            to_phys(out1, nu).ravel(),
            to_phys(out2, nu).ravel(),
            to_phys(y_3, nu).ravel(),
            to_phys(y_q, g.nz).ravel(),
        ])
        return z


# ---------------------------------------------------------------------------
# Flexible GMRES
# ---------------------------------------------------------------------------

def fgmres(apply_op, rhs, precond, tol, restart=40, max_restarts=12, x0=None):
    """Right-preconditioned flexible GMRES with true-residual restarts."""
    n = rhs.shape[0]
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n), {"converged": True, "iterations": 0, "relres": 0.0}
    x = np.zeros(n) if x0 is None else x0.copy()
    total_it = 0
    best = None
    for outer in range(max_restarts):
        r = rhs - apply_op(x)
        beta = np.linalg.norm(r)
        relres = beta / bnorm
        if best is None or relres < best[0]:
            best = (relres, x.copy())
        if relres <= tol:
            return x, {"converged": True, "iterations": total_it, "relres": float(relres)}
        v = np.empty((restart + 1, n))
        z = np.empty((restart, n))
        h = np.zeros((restart + 1, restart))
        cs = np.zeros(restart)
        sn = np.zeros(restart)
        gvec = np.zeros(restart + 1)
        v[0] = r / beta
        gvec[0] = beta
        j_used = 0
        for j in range(restart):
            z[j] = precond(v[j])
            w = apply_op(z[j])
            for i in range(j + 1):
                h[i, j] = np.dot(w, v[i])
                w -= h[i, j] * v[i]
            h[j + 1, j] = np.linalg.norm(w)
            if h[j + 1, j] > 1e-14 * bnorm:
                v[j + 1] = w / h[j + 1, j]
            else:
                v[j + 1] = 0.0
            for i in range(j):
                t = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
                h[i + 1, j] = -sn[i] * h[i, j] + cs[i] * h[i + 1, j]
                h[i, j] = t
            denom = np.hypot(h[j, j], h[j + 1, j])
            if denom == 0.0:
                j_used = j + 1
                break
            cs[j] = h[j, j] / denom
            sn[j] = h[j + 1, j] / denom
            h[j, j] = denom
            h[j + 1, j] = 0.0
            gvec[j + 1] = -sn[j] * gvec[j]
            gvec[j] = cs[j] * gvec[j]
            total_it += 1
            j_used = j + 1
            if abs(gvec[j + 1]) / bnorm <= 0.2 * tol:
                break
        if j_used:
            y = np.linalg.solve(h[:j_used, :j_used], gvec[:j_used])
            x = x + y @ z[:j_used]
    r = rhs - apply_op(x)
    relres = np.linalg.norm(r) / bnorm
    if best is not None and best[0] < relres:
        relres, x = best[0], best[1]
    return x, {"converged": relres <= tol, "iterations": total_it, "relres": float(relres)}


def solve_saddle(op, rhs, solver_tol, x0=None, precond=None, restart=None,
                 max_restarts=14, gauge_pressure=False):
    """Solve the saddle system to the physical residual contract.

    Enforces both the relative l2 residual and the pointwise divergence bound;
    raises :class:`SolverDiverged` if the contract cannot be met.
    """
    g = op.g
    if precond is None:
        precond = FlatModePreconditioner(g)
    if restart is None:
        restart = max(10, min(50, int(1.2e9 / (16 * g.ndof))))

    def project(x):
        if not gauge_pressure:
            return x
        vu, q = op.unpack(x)
        q = q - np.sum(q) / np.sum(g.w_mid) * g.w_mid
        return op.pack(vu, q)

    rhs = project(rhs)
    apply_p = lambda x: project(op.apply(project(x)))
    prec_p = lambda x: project(precond.apply(x))

    x = x0
    tol = solver_tol
    info_all = {"iterations": 0}
    for attempt in range(4):
        x, info = fgmres(apply_p, rhs, prec_p, tol, restart=restart,
                         max_restarts=max_restarts, x0=x)
        info_all["iterations"] += info["iterations"]
        x = project(x)
        diag = op.residual_diagnostics(x, rhs)
        ok = (diag["momentum_residual"] <= solver_tol
              and diag["divergence_residual"] <= solver_tol)
        if ok:
            diag["iterations"] = info_all["iterations"]
            diag["relres"] = info["relres"]
            return x, diag
        tol = tol * 0.1
    diag["iterations"] = info_all["iterations"]
    raise SolverDiverged(
        f"saddle solve stalled: momentum {diag['momentum_residual']:.3e}, "
        f"divergence {diag['divergence_residual']:.3e} (target {solver_tol:.1e})",
        diagnostics=diag,
    )
