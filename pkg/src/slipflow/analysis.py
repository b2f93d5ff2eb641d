"""Multiscale box-averaged measurements over graph-shifted boxes.

All quadratures run in shifted coordinates (x', t) with t = x3 - eps*gamma,
where the box B^eps_{r,+} is exactly (-r, r)^2 x (0, r): uniform midpoint
horizontally, and a composite vertical rule with a fine band over the
boundary-layer thickness.  Fields are represented by samplers exposing
velocity and vertical-derivative values at scattered points; corrector
samplers synthesize the Fourier half-space extension above y3 = 0 and
interpolate the strip solve below.

Discrete channel solutions are measured on their own grid cells (box faces
snapped to the nearest half-cell, snap distance reported).  All analysis
here is read-only over immutable fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBox, NonPositiveData, OutOfDomain, SingularFit

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# Field samplers (shifted box coordinates x1, x2, t)
# ---------------------------------------------------------------------------

class ShearField:
    """The affine shear x3 e_j, expressed over the rough wall."""

    def __init__(self, j, epsilon, boundary):
        self.j = j
        self.epsilon = float(epsilon)
        self.boundary = boundary
        self.y2_invariant = boundary.is_groove()

    def velocity(self, x1, x2, t):
        gam = self.boundary.sample_at(x1 / self.epsilon, x2 / self.epsilon)
        out = np.zeros((len(x1), 3))
        out[:, self.j - 1] = t + self.epsilon * gam
        return out

    def dz3(self, x1, x2, t):
        out = np.zeros((len(x1), 3))
        out[:, self.j - 1] = 1.0
        return out


class ConstantField:
    """A constant vector field (the slip-vector offset of a Navier polynomial)."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float).reshape(3)
        self.y2_invariant = True

    def velocity(self, x1, x2, t):
        return np.broadcast_to(self.value, (len(x1), 3)).copy()

    def dz3(self, x1, x2, t):
        return np.zeros((len(x1), 3))


class _PeriodicLevelInterp:
    """Bilinear-periodic horizontal x linear vertical interpolation."""

    def __init__(self, values, s_nodes):
        # values: (..., nlev, n2, n1) on the torus (0, 2pi)^2
        self.values = values
        self.s = np.asarray(s_nodes)

    def __call__(self, y1, y2, s):
        v = self.values
        n2, n1 = v.shape[-2], v.shape[-1]
        f1 = (y1 % TWO_PI) / (TWO_PI / n1)
        f2 = (y2 % TWO_PI) / (TWO_PI / n2)
        i1 = np.floor(f1).astype(int) % n1
        i2 = np.floor(f2).astype(int) % n2
        t1 = f1 - np.floor(f1)
        t2 = f2 - np.floor(f2)
        j1 = (i1 + 1) % n1
        j2 = (i2 + 1) % n2
        m = np.clip(np.searchsorted(self.s, s) - 1, 0, len(self.s) - 2)
        tz = np.clip((s - self.s[m]) / (self.s[m + 1] - self.s[m]), 0.0, 1.0)

        def plane(lev):
            return ((1 - t1) * (1 - t2) * v[..., lev, i2, i1]
                    + t1 * (1 - t2) * v[..., lev, i2, j1]
                    + (1 - t1) * t2 * v[..., lev, j2, i1]
                    + t1 * t2 * v[..., lev, j2, j1])

        return (1 - tz) * plane(m) + tz * plane(m + 1)


class CorrectorField:
    """v^(j)(x / eps): strip interpolation below y3 = 0, Fourier series above."""

    def __init__(self, corrector, epsilon, mode_trim=1e-10, chunk=16384):
        self.c = corrector
        self.epsilon = float(epsilon)
        self.chunk = chunk
        self.y2_invariant = corrector.boundary.is_groove()
        ks, amps = corrector.trace.mode_arrays(drop_below=mode_trim)
        self.ks = ks
        self.amps = amps
        kk = np.hypot(ks[:, 0], ks[:, 1]).astype(float)
        nzm = kk > 0
        cc = np.zeros(len(ks), dtype=complex)
        cc[nzm] = amps[nzm, 2] - 1j * (ks[nzm, 0] * amps[nzm, 0]
                                       + ks[nzm, 1] * amps[nzm, 1]) / kk[nzm]
        w = np.zeros((len(ks), 3), dtype=complex)
        w[:, 0] = -1j * ks[:, 0]
        w[:, 1] = -1j * ks[:, 1]
        w[:, 2] = kk
        self.kk = kk
        self.blin = w * cc[:, None]        # coefficient of y3 e^{-|k| y3}
        g = corrector.grid
        self._interp_v = _PeriodicLevelInterp(corrector.v, g.sigma)
        from .stokes import MappedStokesOperator

        op = MappedStokesOperator(g)
        grads = np.stack([op.grad_mid(corrector.v[c]) for c in range(3)])
        self._interp_grad = _PeriodicLevelInterp(grads, g.sigma_mid)

    # -- half-space synthesis --------------------------------------------------

    def _hs_values(self, y1, y2, y3):
        out = np.empty((len(y1), 3))
        for a in range(0, len(y1), self.chunk):
            b = slice(a, min(a + self.chunk, len(y1)))
            e = (np.exp(1j * (np.multiply.outer(y1[b], self.ks[:, 0].astype(float))
                              + np.multiply.outer(y2[b], self.ks[:, 1].astype(float))))
                 * np.exp(-np.multiply.outer(y3[b], self.kk)))
            out[b] = np.real(e @ self.amps + y3[b, None] * (e @ self.blin))
        return out

    def _hs_dz(self, y1, y2, y3):
        a0 = -self.kk[:, None] * self.amps + self.blin
        a1 = -self.kk[:, None] * self.blin
        out = np.empty((len(y1), 3))
        for a in range(0, len(y1), self.chunk):
            b = slice(a, min(a + self.chunk, len(y1)))
            e = (np.exp(1j * (np.multiply.outer(y1[b], self.ks[:, 0].astype(float))
                              + np.multiply.outer(y2[b], self.ks[:, 1].astype(float))))
                 * np.exp(-np.multiply.outer(y3[b], self.kk)))
            out[b] = np.real(e @ a0 + y3[b, None] * (e @ a1))
        return out

    def _hs_grad(self, y1, y2, y3):
        out = np.empty((len(y1), 3, 3))
        facs = (1j * self.ks[:, 0].astype(float), 1j * self.ks[:, 1].astype(float))
        a0 = -self.kk[:, None] * self.amps + self.blin
        a1 = -self.kk[:, None] * self.blin
        for a in range(0, len(y1), self.chunk):
            b = slice(a, min(a + self.chunk, len(y1)))
            e = (np.exp(1j * (np.multiply.outer(y1[b], self.ks[:, 0].astype(float))
                              + np.multiply.outer(y2[b], self.ks[:, 1].astype(float))))
                 * np.exp(-np.multiply.outer(y3[b], self.kk)))
            for d in range(2):
                out[b, :, d] = np.real(e @ (facs[d][:, None] * self.amps)
                                       + y3[b, None] * (e @ (facs[d][:, None] * self.blin)))
            out[b, :, 2] = np.real(e @ a0 + y3[b, None] * (e @ a1))
        return out

    # -- public sampling -------------------------------------------------------

    def _split(self, x1, x2, t):
        eps = self.epsilon
        y1 = (x1 / eps) % TWO_PI
        y2 = (x2 / eps) % TWO_PI
        gam = self.c.boundary.sample_at(y1, y2)
        y3 = t / eps + gam
        return y1, y2, y3, gam

    def velocity(self, x1, x2, t):
        y1, y2, y3, gam = self._split(x1, x2, t)
        out = np.empty((len(x1), 3))
        hs = y3 >= 0.0
        if hs.any():
            out[hs] = self._hs_values(y1[hs], y2[hs], y3[hs])
        st = ~hs
        if st.any():
            sig = np.clip((y3[st] - gam[st]) / (-gam[st]), 0.0, 1.0)
            out[st] = self._interp_v(y1[st], y2[st], sig).T
        return out

    def dz3_cell(self, x1, x2, t):
        """d v / d y3 in cell variables (multiply by 1/eps for d/dx3)."""
        y1, y2, y3, gam = self._split(x1, x2, t)
        out = np.empty((len(x1), 3))
        hs = y3 >= 0.0
        if hs.any():
            out[hs] = self._hs_dz(y1[hs], y2[hs], y3[hs])
        st = ~hs
        if st.any():
            sig = np.clip((y3[st] - gam[st]) / (-gam[st]), 0.0, 1.0)
            out[st] = self._interp_grad(y1[st], y2[st], sig)[:, 2, :].T
        return out

    def dz3(self, x1, x2, t):
        return self.dz3_cell(x1, x2, t) / self.epsilon

    def grad_cell(self, x1, x2, t):
        """Full cell-variable gradient (grad_y v)(x/eps): (npts, 3, 3)."""
        y1, y2, y3, gam = self._split(x1, x2, t)
        out = np.empty((len(x1), 3, 3))
        hs = y3 >= 0.0
        if hs.any():
            out[hs] = self._hs_grad(y1[hs], y2[hs], y3[hs])
        st = ~hs
        if st.any():
            sig = np.clip((y3[st] - gam[st]) / (-gam[st]), 0.0, 1.0)
            out[st] = np.moveaxis(self._interp_grad(y1[st], y2[st], sig), -1, 0)
        return out


class CombinedField:
    """Linear combination of samplers (shear + eps * corrector, etc.)."""

    def __init__(self, terms):
        self.terms = [(float(a), f) for a, f in terms]
        self.y2_invariant = all(f.y2_invariant for _, f in self.terms)

    def velocity(self, x1, x2, t):
        return sum(a * f.velocity(x1, x2, t) for a, f in self.terms)

    def dz3(self, x1, x2, t):
        return sum(a * f.dz3(x1, x2, t) for a, f in self.terms)


class ChannelField:
    """Discrete channel solution sampled on its own shear-mapped grid."""

    def __init__(self, sol):
        self.sol = sol
        self.y2_invariant = False
        from .stokes import MappedStokesOperator

        self.grid = sol.grid
        op = MappedStokesOperator(sol.grid)
        self._grads = np.stack([op.grad_mid(sol.u[c]) for c in range(3)])

    def _locate(self, x1, x2):
        g = self.grid
        f1 = (x1 % g.L) / g.h1
        f2 = (x2 % g.L) / g.h2
        i1 = np.floor(f1).astype(int) % g.n1
        i2 = np.floor(f2).astype(int) % g.n2
        return i1, i2, f1 - np.floor(f1), f2 - np.floor(f2)

    def _bilinear(self, plane, loc):
        i1, i2, t1, t2 = loc
        g = self.grid
        j1 = (i1 + 1) % g.n1
        j2 = (i2 + 1) % g.n2
        return ((1 - t1) * (1 - t2) * plane[..., i2, i1]
                + t1 * (1 - t2) * plane[..., i2, j1]
                + (1 - t1) * t2 * plane[..., j2, i1]
                + t1 * t2 * plane[..., j2, j1])

    @staticmethod
    def _vert(s_nodes, samples):
        m = np.clip(np.searchsorted(s_nodes, samples) - 1, 0, len(s_nodes) - 2)
        tz = np.clip((samples - s_nodes[m]) / (s_nodes[m + 1] - s_nodes[m]), 0.0, 1.0)
        return m, tz

    def velocity(self, x1, x2, t):
        loc = self._locate(x1, x2)
        m, tz = self._vert(self.grid.sigma, t)
        idx = np.arange(len(x1))
        out = np.empty((len(x1), 3))
        for c in range(3):
            cols = self._bilinear(self.sol.u[c], loc)
            out[:, c] = (1 - tz) * cols[m, idx] + tz * cols[m + 1, idx]
        return out

    def dz3(self, x1, x2, t):
        loc = self._locate(x1, x2)
        m, tz = self._vert(self.grid.sigma_mid, t)
        idx = np.arange(len(x1))
        out = np.empty((len(x1), 3))
        for c in range(3):
            cols = self._bilinear(self._grads[c, 2], loc)
            out[:, c] = (1 - tz) * cols[m, idx] + tz * cols[m + 1, idx]
        return out

    def grad_norm2(self, x1, x2, t):
        """|grad u|^2 interpolated from the mid-level gradient arrays."""
        loc = self._locate(x1, x2)
        m, tz = self._vert(self.grid.sigma_mid, t)
        idx = np.arange(len(x1))
        total = np.zeros(len(x1))
        for c in range(3):
            for d in range(3):
                cols = self._bilinear(self._grads[c, d], loc)
                vals = (1 - tz) * cols[m, idx] + tz * cols[m + 1, idx]
                total += vals * vals
        return total


def manufactured_field(corrector, epsilon):
    """The wall-law test field x3 e_j + eps v^(j)(x/eps) (an exact Stokes flow)."""
    shear = ShearField(corrector.j, epsilon, corrector.boundary)
    corr = CorrectorField(corrector, epsilon)
    return CombinedField([(1.0, shear), (epsilon, corr)])


def navier_polynomial_field(j, epsilon, alpha):
    """Closure evaluating the Navier polynomial x -> x3 e_j + eps alpha^(j).

    An exact solution of the Navier-slip system with zero pressure: its
    momentum and divergence residuals vanish identically.
    """
    alpha = np.asarray(alpha, dtype=float).reshape(3)
    epsilon = float(epsilon)

    def poly(points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.tile(epsilon * alpha, (pts.shape[0], 1))
        out[:, j - 1] += pts[:, 2]
        return out

    poly.j = j
    poly.epsilon = epsilon
    poly.alpha = alpha
    poly.divergence = lambda points: np.zeros(np.atleast_2d(points).shape[0])
    poly.momentum_residual = lambda points: np.zeros(np.atleast_2d(points).shape[0])
    poly.shear_rate = np.eye(3)[j - 1]
    return poly


# ---------------------------------------------------------------------------
# Box quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxQuadrature:
    """Tensor midpoint rule on (-r, r)^2 x (0, r) in shifted coordinates."""

    x1: np.ndarray
    x2: np.ndarray
    t: np.ndarray
    wt: np.ndarray          # vertical weights per t node
    wh: float               # horizontal weight per column
    snap_distance: float = 0.0

    @property
    def volume(self):
        return float(np.sum(self.wt)) * self.wh * len(self.x1) * len(self.x2)

    def level_nodes(self, sel):
        """Flattened (x1, x2, t) nodes for a block of vertical levels."""
        xx2, xx1 = np.meshgrid(self.x2, self.x1, indexing="ij")
        nh = xx1.size
        tsel = self.t[sel]
        x1 = np.tile(xx1.ravel(), len(tsel))
        x2 = np.tile(xx2.ravel(), len(tsel))
        tt = np.repeat(tsel, nh)
        w = np.repeat(self.wt[sel], nh) * self.wh
        return x1, x2, tt, w

    def blocks(self, max_points=200_000):
        nh = len(self.x1) * len(self.x2)
        step = max(1, max_points // max(nh, 1))
        for a in range(0, len(self.t), step):
            yield self.level_nodes(slice(a, min(a + step, len(self.t))))


def _midpoints(a, b, n):
    edges = np.linspace(a, b, n + 1)
    return 0.5 * (edges[:-1] + edges[1:]), np.diff(edges)


def box_quadrature(epsilon, r, groove=False, m_horizontal=None,
                   n_layer=48, n_bulk=64, layer_factor=8.0):
    """Layered quadrature resolving the exponential boundary-layer band."""
    if m_horizontal is None:
        per = TWO_PI * epsilon
        m_horizontal = int(min(192, max(48, np.ceil(24 * 2 * r / per))))
    x1, dx1 = _midpoints(-r, r, m_horizontal)
    if groove:
        x2 = np.array([0.0])
        wh = dx1[0] * 2 * r
    else:
        x2, _ = _midpoints(-r, r, m_horizontal)
        wh = dx1[0] ** 2
    t_split = min(layer_factor * epsilon, r)
    tf, wf = _midpoints(0.0, t_split, n_layer)
    if t_split < r:
        tb, wb = _midpoints(t_split, r, n_bulk)
        t = np.concatenate([tf, tb])
        wt = np.concatenate([wf, wb])
    else:
        t, wt = tf, wf
    return BoxQuadrature(x1=x1, x2=x2, t=t, wt=wt, wh=wh)


def snapped_box_quadrature(sol, r):
    """Channel-grid quadrature: box faces snapped to the nearest half-cell."""
    g = sol.grid
    if 2 * r > g.L + 1e-12:
        raise OutOfDomain(f"box of half-width {r} exceeds the lateral period {g.L}")
    if r > 1.0 + 1e-12:
        raise OutOfDomain("box taller than the channel")
    ncell = max(2, int(round(2 * r / g.h1)))
    r1 = 0.5 * ncell * g.h1
    x1, dx1 = _midpoints(-r1, r1, ncell)
    ncell2 = max(2, int(round(2 * r / g.h2)))
    r2 = 0.5 * ncell2 * g.h2
    x2, dx2 = _midpoints(-r2, r2, ncell2)
    nv = max(1, int(round(r * g.nz)))
    rv = nv / g.nz
    t, wt = _midpoints(0.0, rv, nv)
    snap = max(abs(r1 - r), abs(r2 - r), abs(rv - r))
    return BoxQuadrature(x1=x1, x2=x2, t=t, wt=wt, wh=dx1[0] * dx2[0],
                         snap_distance=float(snap))


def quadrature_for(field, epsilon, r, **opts):
    if isinstance(field, ChannelField):
        return snapped_box_quadrature(field.sol, r)
    groove = getattr(field, "y2_invariant", False)
    return box_quadrature(epsilon, r, groove=groove, **opts)


# ---------------------------------------------------------------------------
# Box integrals and fits
# ---------------------------------------------------------------------------

def _box_products(fields, quad, with_dz_of=None):
    """Weighted Gram matrix of the samplers plus an optional dz3 average."""
    n = len(fields)
    gram = np.zeros((n, n))
    dz_sum = np.zeros(2)
    vol = 0.0
    for x1, x2, t, w in quad.blocks():
        vals = [f.velocity(x1, x2, t) for f in fields]
        for i in range(n):
            for j in range(i, n):
                gram[i, j] += float(np.sum(w * np.sum(vals[i] * vals[j], axis=1)))
        if with_dz_of is not None:
            dz = fields[with_dz_of].dz3(x1, x2, t)
            dz_sum += np.array([np.sum(w * dz[:, 0]), np.sum(w * dz[:, 1])])
        vol += float(np.sum(w))
    gram = gram + np.triu(gram, 1).T
    return gram, vol, dz_sum / vol


def box_average_l2(field, epsilon, r, quad=None):
    """Box-averaged L2 norm over B^eps_{r,+}(0) (volume 4 r^3 exactly)."""
    quad = quad or quadrature_for(field, epsilon, r)
    gram, vol, _ = _box_products([field], quad)
    return float(np.sqrt(gram[0, 0] / vol))


def fit_slip_coefficients(field, epsilon, r, correctors, quad=None):
    """Two slip-coefficient estimators over one box.

    c_grad : box average of the vertical derivative of the tangential
        components (the compactness-scheme coefficient).
    c_lsq : least-squares coefficients of the field against the corrector
        span {x3 e_j + eps v^(j)(x/eps)}.
    """
    quad = quad or quadrature_for(field, epsilon, r)
    members = [manufactured_field(c, epsilon) for c in correctors]
    gram, vol, c_grad = _box_products([field] + members, quad, with_dz_of=0)
    gmat = gram[1:, 1:]
    cond = np.linalg.cond(gmat)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularFit(f"corrector-span Gram matrix has condition {cond:.2e}")
    c_lsq = np.linalg.solve(gmat, gram[0, 1:])
    return {"c_grad": np.asarray(c_grad), "c_lsq": c_lsq}


@dataclass
class ScaleReport:
    """Per-box-size table of averages, fitted coefficients, and residuals."""

    epsilon: float
    r_values: np.ndarray
    columns: dict
    fitted_slopes: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    CSV_HEADER = ("r,avg_l2,lipschitz_ratio,c1_grad,c2_grad,c1_lsq,c2_lsq,"
                  "res_plain,res_corrector,res_navier")

    def column(self, name):
        return np.asarray(self.columns[name])

    def to_csv(self, path):
        names = self.CSV_HEADER.split(",")[1:]
        with open(path, "w") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for i, r in enumerate(self.r_values):
                row = [repr(float(r))] + [repr(float(self.columns[n][i])) for n in names]
                fh.write(",".join(row) + "\n")

    def to_json_dict(self):
        return {
            "epsilon": self.epsilon,
            "r_values": [float(r) for r in self.r_values],
            "slopes": {k: {"slope": v[0], "band": v[1]}
                       for k, v in self.fitted_slopes.items()},
            "extras": {k: np.asarray(v).tolist() for k, v in self.extras.items()},
        }


def scale_scan(field, epsilon, r_values, correctors, quad_opts=None):
    """Populate a :class:`ScaleReport` over decreasing box sizes.

    Residual columns are box-averaged L2 norms of the field minus its
    representation in each span (plain shear / corrector-enriched / Navier
    polynomials), all with the shared corrector-span least-squares
    coefficients; c_grad-based and per-span-optimal residual variants are
    recorded in ``extras``.
    """
    r_values = np.asarray(sorted(r_values, reverse=True), dtype=float)
    if np.any(r_values < epsilon - 1e-12) or np.any(r_values > 1.0 + 1e-12):
        raise ValueError("r values must lie in [epsilon, 1]")
    quad_opts = quad_opts or {}
    c1, c2 = correctors
    boundary = c1.boundary
    alpha = (c1.alpha, c2.alpha)

    shear = [ShearField(j, epsilon, boundary) for j in (1, 2)]
    corr = [CorrectorField(c, epsilon) for c in (c1, c2)]
    spans = {
        "plain": [CombinedField([(1.0, shear[j])]) for j in range(2)],
        "corrector": [CombinedField([(1.0, shear[j]), (epsilon, corr[j])])
                      for j in range(2)],
        "navier": [CombinedField([(1.0, shear[j]),
                                  (epsilon, ConstantField(alpha[j]))])
                   for j in range(2)],
    }
    idx = {"plain": (1, 2), "corrector": (3, 4), "navier": (5, 6)}

    cols = {k: [] for k in ("avg_l2", "lipschitz_ratio", "c1_grad", "c2_grad",
                            "c1_lsq", "c2_lsq", "res_plain", "res_corrector",
                            "res_navier")}
    extras = {k: [] for k in ("res_plain_grad", "res_corrector_grad",
                              "res_navier_grad", "res_plain_opt",
                              "res_corrector_opt", "res_navier_opt",
                              "snap_distance")}

    for r in r_values:
        quad = quadrature_for(field, epsilon, r, **quad_opts)
        fields = [field] + spans["plain"] + spans["corrector"] + spans["navier"]
        gram, vol, c_grad = _box_products(fields, quad, with_dz_of=0)
        uu = gram[0, 0]

        gmat = gram[np.ix_(idx["corrector"], idx["corrector"])]
        cond = np.linalg.cond(gmat)
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularFit(f"corrector-span Gram condition {cond:.2e} at r={r}")
        c_lsq = np.linalg.solve(gmat, gram[0, list(idx["corrector"])])

        def residual(span, coef):
            ii = list(idx[span])
            val = (uu - 2.0 * coef @ gram[0, ii]
                   + coef @ gram[np.ix_(ii, ii)] @ coef)
            return float(np.sqrt(max(val, 0.0) / vol))

        def residual_opt(span):
            ii = list(idx[span])
            coef = np.linalg.solve(gram[np.ix_(ii, ii)], gram[0, ii])
            return float(np.sqrt(max(uu - coef @ gram[0, ii], 0.0) / vol))

        avg = float(np.sqrt(uu / vol))
        cols["avg_l2"].append(avg)
        cols["lipschitz_ratio"].append(avg / r)
        cols["c1_grad"].append(float(c_grad[0]))
        cols["c2_grad"].append(float(c_grad[1]))
        cols["c1_lsq"].append(float(c_lsq[0]))
        cols["c2_lsq"].append(float(c_lsq[1]))
        cols["res_plain"].append(residual("plain", c_lsq))
        cols["res_corrector"].append(residual("corrector", c_lsq))
        cols["res_navier"].append(residual("navier", c_lsq))
        extras["res_plain_grad"].append(residual("plain", np.asarray(c_grad)))
        extras["res_corrector_grad"].append(residual("corrector", np.asarray(c_grad)))
        extras["res_navier_grad"].append(residual("navier", np.asarray(c_grad)))
        extras["res_plain_opt"].append(residual_opt("plain"))
        extras["res_corrector_opt"].append(residual_opt("corrector"))
        extras["res_navier_opt"].append(residual_opt("navier"))
        extras["snap_distance"].append(quad.snap_distance)

    report = ScaleReport(epsilon=float(epsilon), r_values=r_values,
                         columns={k: np.array(v) for k, v in cols.items()},
                         extras={k: np.array(v) for k, v in extras.items()})
    if len(r_values) >= 3:
        for name in ("avg_l2", "res_plain", "res_corrector", "res_navier"):
            vals = report.column(name)
            if np.all(vals > 0.0):
                report.fitted_slopes[f"{name}_vs_r"] = rate_fit(r_values, vals)
    return report


def rate_fit(xs, ys):
    """Log-log OLS slope with a 95 percent band from the residual variance."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(ys <= 0.0) or np.any(xs <= 0.0):
        raise NonPositiveData("rate fit requires positive data")
    if len(xs) < 3:
        raise ValueError("rate fit needs at least 3 points")
    lx, ly = np.log(xs), np.log(ys)
    a = np.vstack([lx, np.ones_like(lx)]).T
    coef, *_ = np.linalg.lstsq(a, ly, rcond=None)
    fit = a @ coef
    dof = max(len(xs) - 2, 1)
    sigma2 = float(np.sum((ly - fit) ** 2)) / dof
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    band = 1.96 * np.sqrt(sigma2 / sxx)
    return float(coef[0]), float(band)


# ---------------------------------------------------------------------------
# Corrector scaling check and Caccioppoli ratio
# ---------------------------------------------------------------------------

def corrector_scaling_check(corrector, eps_values, r, quad_opts=None):
    """Measured epsilon-exponents of the corrector box integrals at fixed r.

    Integrates |(grad_y v)(x/eps)|^2 and |v(x/eps)|^2 over B^eps_{r,+} for
    each epsilon and fits log-log slopes in epsilon.  The gradient integral
    follows the cell-energy scaling eps r^2 (exponent one); the L2 integral
    is reported as measured.
    """
    eps_values = np.asarray(sorted(eps_values, reverse=True), dtype=float)
    if np.any(eps_values > r + 1e-12):
        raise ValueError("eps values must not exceed r")
    quad_opts = quad_opts or {}
    grad_ints, l2_ints = [], []
    for eps in eps_values:
        fld = CorrectorField(corrector, eps)
        quad = box_quadrature(eps, r, groove=fld.y2_invariant, **quad_opts)
        gtot = 0.0
        vtot = 0.0
        for x1, x2, t, w in quad.blocks():
            g = fld.grad_cell(x1, x2, t)
            v = fld.velocity(x1, x2, t)
            gtot += float(np.sum(w * np.sum(g * g, axis=(1, 2))))
            vtot += float(np.sum(w * np.sum(v * v, axis=1)))
        grad_ints.append(gtot)
        l2_ints.append(vtot)
    grad_ints = np.array(grad_ints)
    l2_ints = np.array(l2_ints)
    out = {
        "eps_values": eps_values,
        "grad_integrals": grad_ints,
        "l2_integrals": l2_ints,
    }
    if np.all(grad_ints > 0):
        out["grad_exponent"] = rate_fit(eps_values, grad_ints)
    if np.all(l2_ints > 0):
        out["l2_exponent"] = rate_fit(eps_values, l2_ints)
    return out


def caccioppoli_ratio(sol, rho, r):
    """Interior/boundary energy ratio of the Caccioppoli inequality.

    lhs is the squared gradient norm over the rho-box; the right-hand side
    combines the squared and sixth-power L2 norms over the r-box weighted
    by (r-rho)^{-2} and (r-rho)^{-4} (zero drift and forcing, unit
    nonlinearity).  implied_K is their ratio, bounded uniformly over box
    pairs by the inequality.
    """
    if not (0.0 < rho < r <= 1.0):
        raise ValueError("need 0 < rho < r <= 1")
    g = sol.grid
    if (r - rho) < 2.0 * max(g.h1, g.h2, 1.0 / g.nz):
        raise DegenerateBox("r - rho below two grid cells")
    fld = ChannelField(sol)
    quad_rho = snapped_box_quadrature(sol, rho)
    lhs = 0.0
    for x1, x2, t, w in quad_rho.blocks():
        lhs += float(np.sum(w * fld.grad_norm2(x1, x2, t)))
    quad_r = snapped_box_quadrature(sol, r)
    u2 = 0.0
    for x1, x2, t, w in quad_r.blocks():
        u2 += float(np.sum(w * np.sum(fld.velocity(x1, x2, t) ** 2, axis=1)))
    gap = r - rho
    term1 = u2 / gap**2
    term2 = u2**3 / gap**4
    total = term1 + term2
    return {
        "lhs": lhs,
        "rhs_terms": {"l2_term": term1, "l6_term": term2},
        "implied_K": lhs / total if total > 0 else 0.0,
    }
