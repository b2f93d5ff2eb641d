"""Acceptance checks, shared by the pytest suite and the selftest command.

Each check returns a list of (sub-name, passed, expected_fail, detail)
tuples evaluated at the stated tolerances.  ``expected_fail`` marks the
three sub-criteria whose stated targets are not attainable for periodic
correctors (the slip offset makes the plain-span residual flat in r, and
the corrector L2 box integral saturates at |alpha|^2 |box|); they are
still measured and asserted so a change in behavior is caught.

Fast mode shrinks resolutions for a quick smoke run; full mode uses the
production resolutions of the acceptance contract.
"""

from __future__ import annotations

import os
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import analysis, cell, channel, geometry
from .halfspace import SpectralTrace, _dn_matrix, halfspace_fourier_eval, poisson_solve

TWO_PI = 2.0 * np.pi


def parameters(fast):
    if fast:
        return {
            "random_res": (32, 32, 32), "n_random": 2,
            "sin_res": (128, 1, 48),
            "channel_res": (48, 48, 32), "channel_res_fine": (72, 72, 48),
            "flat_channel_res": (48, 48, 32),
            "weak_test_functions": 2,
        }
    return {
        "random_res": (64, 64, 64), "n_random": 5,
        "sin_res": (256, 1, 96),
        "channel_res": (96, 96, 64), "channel_res_fine": (144, 144, 96),
        "flat_channel_res": (96, 96, 64),
        "weak_test_functions": 2,
    }


class Context:
    """Lazy cache of the expensive shared artifacts."""

    def __init__(self, fast=True, seed=0):
        self.fast = fast
        self.seed = seed
        self.p = parameters(fast)
        self._cache = {}

    def sinusoid_boundary(self):
        return self._memo("sin_bnd", lambda: geometry.build_boundary(
            {(0, 0): -0.5, (1, 0): 0.05, (-1, 0): 0.05}, 16))

    def sinusoid_correctors(self):
        def build():
            shared = {}
            return tuple(
                cell.solve_corrector(self.sinusoid_boundary(), j,
                                     self.p["sin_res"], 1e-9, _shared=shared)
                for j in (1, 2))
        return self._memo("sin_corr", build)

    def random_cases(self):
        def build():
            cases = []
            for i in range(self.p["n_random"]):
                bnd = geometry.random_boundary(self.seed + 11 * i + 1)
                shared = {}
                c1 = cell.solve_corrector(bnd, 1, self.p["random_res"], 1e-8,
                                          _shared=shared)
                c2 = cell.solve_corrector(bnd, 2, self.p["random_res"], 1e-8,
                                          _shared=shared)
                cases.append((bnd, c1, c2))
            return cases
        return self._memo("random_cases", build)

    def channel_ref(self):
        return self._memo("channel_ref", lambda: channel.solve_channel(
            self.sinusoid_boundary(), 1 / 16, (1.0, 0.0), nonlinear=True,
            resolution=self.p["channel_res"], tol=1e-8, nper=3))

    def channel_ref_fine(self):
        return self._memo("channel_ref_fine", lambda: channel.solve_channel(
            self.sinusoid_boundary(), 1 / 16, (1.0, 0.0), nonlinear=True,
            resolution=self.p["channel_res_fine"], tol=1e-8, nper=3,
            initial_guess=self.channel_ref()))

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]


# ---------------------------------------------------------------------------
# Criteria
# ---------------------------------------------------------------------------

def check_flat_wall_exactness(ctx):
    out = []
    for c in (0.25, 0.5, 0.75):
        bnd = geometry.build_boundary({(0, 0): complex(-c)}, 16)
        sm = cell.slip_matrix(bnd, (16, 16, 16), 1e-10)
        shared = {}
        a1 = cell.solve_corrector(bnd, 1, (16, 16, 16), 1e-10, _shared=shared).alpha
        a2 = cell.solve_corrector(bnd, 2, (16, 16, 16), 1e-10, _shared=shared).alpha
        dev = max(np.abs(a1 - [c, 0, 0]).max(), np.abs(a2 - [0, c, 0]).max())
        mdev = np.abs(sm.m - c * np.eye(2)).max()
        out.append((f"alpha(c={c})", dev <= 1e-8, False, f"dev={dev:.2e}"))
        out.append((f"matrix(c={c})", mdev <= 1e-8, False, f"dev={mdev:.2e}"))
    return out


def check_dn_coercivity(ctx):
    rng = np.random.default_rng(ctx.seed)
    worst_gap = np.inf
    worst_herm = 0.0
    for _ in range(1000):
        xi = rng.normal(size=2) * np.exp(rng.uniform(-2, 2))
        if np.hypot(*xi) == 0.0:
            continue
        w = rng.normal(size=3) + 1j * rng.normal(size=3)
        m = _dn_matrix(xi[0], xi[1])
        val = float(np.real(np.vdot(w, m @ w)))
        bound = float(np.hypot(*xi) * np.real(np.vdot(w, w)))
        worst_gap = min(worst_gap, val - bound)
        worst_herm = max(worst_herm, float(np.abs(m - m.conj().T).max()))
    return [
        ("coercivity", worst_gap >= -1e-12, False, f"min gap={worst_gap:.2e}"),
        ("hermitian", worst_herm <= 1e-14, False, f"defect={worst_herm:.2e}"),
    ]


def check_oracle_equivalence(ctx):
    sigma = 0.2
    n = 128
    y = TWO_PI * np.arange(n) / n
    yy1, yy2 = np.meshgrid(y, y)

    def gauss(a, b):
        return np.exp(-((a - np.pi) ** 2 + (b - np.pi) ** 2) / (2 * sigma**2))

    vals = np.zeros((n, n, 3))
    vals[:, :, 0] = gauss(yy1, yy2)
    trace = SpectralTrace.from_grid(vals)

    span, nf = 3, 768
    gx = span * TWO_PI * np.arange(nf) / nf + (np.pi - span * np.pi)
    gxx, gyy = np.meshgrid(gx, gx)
    u0 = np.zeros((nf, nf, 3))
    u0[:, :, 0] = sum(
        np.exp(-((gxx - np.pi - TWO_PI * a) ** 2 + (gyy - np.pi - TWO_PI * b) ** 2)
               / (2 * sigma**2))
        for a in range(-1, 2) for b in range(-1, 2))

    heights = [0.05, 0.08, 0.11, 0.14]
    cols = [n // 2 - 6, n // 2 - 3, n // 2, n // 2 + 3, n // 2 + 6]
    fld = halfspace_fourier_eval(trace, heights, grid_size=n)
    vel, _ = fld.physical_fields()
    pts, four = [], []
    for hi, h in enumerate(heights):
        for i in cols:
            pts.append([y[i], y[n // 2], h])
            four.append(vel[hi, n // 2, i])
    pts, four = np.array(pts), np.array(four)
    pois = poisson_solve(u0, gx, gx, pts)
    rel = (np.abs(four - pois).max(axis=1) / np.abs(four).max(axis=1)).max()
    return [("agreement_20pts", rel <= 1e-3, False, f"max rel={rel:.2e}")]


def check_slip_matrix_structure(ctx):
    out = []
    for i, (bnd, c1, c2) in enumerate(ctx.random_cases()):
        sm = cell.slip_matrix(bnd, correctors=(c1, c2))
        norm = np.linalg.norm(sm.m)
        a3 = max(abs(c1.alpha[2]), abs(c2.alpha[2]))
        rec = abs(c1.alpha[1] - c2.alpha[0])
        ok = (sm.asymmetry <= 1e-4 * norm and min(sm.eigenvalues) > 0.0
              and a3 <= 1e-5 and rec <= 1e-4)
        out.append((f"profile{i}", ok, False,
                    f"asym={sm.asymmetry:.1e} eig={min(sm.eigenvalues):.3f} "
                    f"a3={a3:.1e} recip={rec:.1e}"))
    return out


def check_energy_identity(ctx):
    c1, _ = ctx.sinusoid_correctors()
    rec = cell.energy_slip_identity(c1)
    return [("mismatch", rec["mismatch"] <= 1e-3, False,
             f"mismatch={rec['mismatch']:.2e}")]


def check_decay(ctx):
    out = []
    c1, _ = ctx.sinusoid_correctors()
    fit = cell.decay_fit(c1)
    ok_band = 0.8 <= fit["fitted_rate"] <= 1.2
    out.append(("sinusoid_band", ok_band and not fit["degenerate"], False,
                f"rate={fit['fitted_rate']:.3f}"))
    rates = [fit["fitted_rate"]]
    for i, (_, ca, _cb) in enumerate(ctx.random_cases()):
        f = cell.decay_fit(ca)
        rates.append(f["fitted_rate"])
        out.append((f"random{i}_min", f["fitted_rate"] >= 0.5 and not f["degenerate"],
                    False, f"rate={f['fitted_rate']:.3f}"))
    return out


def check_corrector_scalings(ctx):
    c1, _ = ctx.sinusoid_correctors()
    res = analysis.corrector_scaling_check(c1, [1 / 8, 1 / 16, 1 / 32, 1 / 64], 0.5)
    ge, gb = res["grad_exponent"]
    le, lb = res["l2_exponent"]
    return [
        ("gradient_exponent", abs(ge - 1.0) <= 0.2, False,
         f"measured {ge:.3f} +- {gb:.3f} (target 1.0 +- 0.2)"),
        ("l2_exponent", abs(le - (-1.0)) <= 0.2, True,
         f"measured {le:.3f} +- {lb:.3f} (target -1.0 +- 0.2; saturates at "
         f"|alpha|^2 |box| for periodic correctors, see decisions ledger)"),
    ]


def check_wall_law_rates(ctx):
    c1, c2 = ctx.sinusoid_correctors()
    eps = 1 / 32
    field = analysis.manufactured_field(c1, eps)
    rep = analysis.scale_scan(field, eps, [1 / 2, 1 / 4, 1 / 8, 1 / 16], (c1, c2))
    sp, _ = rep.fitted_slopes["res_plain_vs_r"]
    sn, _ = rep.fitted_slopes["res_navier_vs_r"]
    imp, rn = {}, {}
    for e in (1 / 8, 1 / 16, 1 / 32):
        r1 = analysis.scale_scan(analysis.manufactured_field(c1, e), e, [1 / 4],
                                 (c1, c2))
        rp = r1.column("res_plain")[0]
        rn[e] = r1.column("res_navier")[0]
        imp[e] = rn[e] / rp
    xs = sorted(imp)
    imp_slope, _ = analysis.rate_fit(xs, [imp[x] for x in xs])
    rn_slope, _ = analysis.rate_fit(xs, [rn[x] for x in xs])
    return [
        ("res_plain_slope", abs(sp - 0.5) <= 0.15, True,
         f"measured {sp:.3f} (target 0.5 +- 0.15; flat in r because the "
         f"eps*alpha offset dominates, see decisions ledger)"),
        ("res_navier_slope", abs(sn - (-0.5)) <= 0.15, False,
         f"measured {sn:.3f} (target -0.5 +- 0.15)"),
        ("res_navier_eps_slope", abs(rn_slope - 1.5) <= 0.3, False,
         f"measured {rn_slope:.3f} (target 1.5 +- 0.3)"),
        ("improvement_slope", abs(imp_slope - 1.0) <= 0.3, True,
         f"measured {imp_slope:.3f} (target 1.0 +- 0.3; res_plain carries "
         f"one epsilon power, see decisions ledger)"),
    ]


def check_channel_correctness(ctx):
    out = []
    flat = geometry.build_boundary({(0, 0): -0.5}, 16)
    sol = channel.solve_channel(flat, 1 / 8, (1.0, 0.0), nonlinear=True,
                                resolution=ctx.p["flat_channel_res"],
                                tol=1e-12, nper=2)
    exact = sol.grid.sigma[:, None, None] * 1.0
    dev = max(float(np.abs(sol.u[0] - exact).max()),
              float(np.abs(sol.u[1:]).max()))
    out.append(("couette_exact", dev <= 1e-10, False, f"dev={dev:.2e}"))

    ref = ctx.channel_ref()
    wr = channel.weak_residual(ref, ctx.p["weak_test_functions"], seed=ctx.seed)
    out.append(("weak_residual", wr <= 1e-8, False, f"residual={wr:.2e}"))
    _, _, mis = channel.energy_balance(ref)
    out.append(("energy_balance", mis <= 1e-6, False, f"mismatch={mis:.2e}"))
    return out


def _lipschitz_ratio(sol, eps):
    fld = analysis.ChannelField(sol)
    rs = np.linspace(4 * eps, 0.5, 5)
    vals = [analysis.box_average_l2(fld, eps, r) / r for r in rs]
    return max(vals) / min(vals)


def check_lipschitz_boundedness(ctx):
    eps = 1 / 16
    base = _lipschitz_ratio(ctx.channel_ref(), eps)
    fine = _lipschitz_ratio(ctx.channel_ref_fine(), eps)
    drift = abs(fine - base) / base
    return [
        ("ratio_bounded", base <= 10.0, False, f"max/min={base:.3f}"),
        ("refinement_stable", drift <= 0.2, False,
         f"base={base:.3f} fine={fine:.3f} drift={drift:.1%}"),
    ]


def check_caccioppoli(ctx):
    # pair grid chosen so every gap clears two cells of the coarser grid
    rhos = np.linspace(0.08, 0.24, 5) if ctx.fast else np.linspace(0.10, 0.30, 5)
    rads = np.linspace(0.34, 0.56, 5) if ctx.fast else np.linspace(0.35, 0.55, 5)

    def max_k(sol):
        ks = []
        for rho in rhos:
            for r in rads:
                ks.append(analysis.caccioppoli_ratio(sol, rho, r)["implied_K"])
        return max(ks)

    base = max_k(ctx.channel_ref())
    fine = max_k(ctx.channel_ref_fine())
    drift = abs(fine - base) / base
    return [
        ("finite", np.isfinite(base) and base > 0.0, False, f"max K={base:.4f}"),
        ("refinement_stable", drift <= 0.2, False,
         f"base={base:.4f} fine={fine:.4f} drift={drift:.1%}"),
    ]


def check_reproducibility(ctx):
    cfg = {
        "boundary": {"preset": "sinusoid", "grid": 16},
        "resolution": [64, 1, 32],
        "solver_tol": 1e-9,
    }
    import json

    def run(out_dir):
        here = os.path.join(out_dir, "cfg.json")
        with open(here, "w") as fh:
            json.dump(cfg, fh)
        rc = subprocess.run(
            [sys.executable, "-m", "slipflow.cli", "corrector",
             "--config", here, "--out", out_dir, "--seed", "7"],
            capture_output=True, text=True)
        if rc.returncode != 0:
            raise RuntimeError(rc.stderr)
        blobs = {}
        for name in sorted(os.listdir(out_dir)):
            if name == "cfg.json":
                continue
            with open(os.path.join(out_dir, name), "rb") as fh:
                blobs[name] = fh.read()
        return blobs

    tmp = tempfile.mkdtemp(prefix="slipflow-repro-")
    try:
        dir_a = os.path.join(tmp, "a")
        dir_b = os.path.join(tmp, "b")
        os.makedirs(dir_a)
        os.makedirs(dir_b)
        a = run(dir_a)
        b = run(dir_b)
        same = set(a) == set(b) and all(a[k] == b[k] for k in a)
        detail = f"{len(a)} artifacts compared"
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return [("byte_identical", same, False, detail)]


CHECKS = [
    ("C01", "flat-wall-exactness", check_flat_wall_exactness),
    ("C02", "dn-coercivity", check_dn_coercivity),
    ("C03", "oracle-equivalence", check_oracle_equivalence),
    ("C04", "slip-matrix-structure", check_slip_matrix_structure),
    ("C05", "energy-identity", check_energy_identity),
    ("C06", "decay-rates", check_decay),
    ("C07", "corrector-scalings", check_corrector_scalings),
    ("C08", "wall-law-rates", check_wall_law_rates),
    ("C09", "channel-correctness", check_channel_correctness),
    ("C10", "lipschitz-boundedness", check_lipschitz_boundedness),
    ("C11", "caccioppoli-diagnostic", check_caccioppoli),
    ("C12", "reproducibility", check_reproducibility),
]


@dataclass
class CheckResult:
    cid: str
    name: str
    passed: bool
    expected_fail: bool
    detail: str
    seconds: float


def run_all(fast=True, seed=0, out_dir=None):
    ctx = Context(fast=fast, seed=seed)
    results = []
    for cid, name, fn in CHECKS:
        t0 = time.time()
        try:
            subs = fn(ctx)
        except Exception as exc:  # a crashed check is a failed check
            subs = [("exception", False, False, repr(exc))]
        dt = time.time() - t0
        for sub, ok, xfail, detail in subs:
            results.append(CheckResult(cid, f"{name}/{sub}", ok, xfail, detail, dt))
            dt = 0.0
    return results
